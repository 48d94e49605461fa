use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{hash_text, ExperimentConfig};
use super::run::Artifacts;
use crate::adapt::AdapterKind;
use crate::error::{Error, Result};
use crate::hier::TreeFile;
use crate::net::Network;
use crate::persist::{load_network, load_prior, save_network, save_prior};

pub const MANIFEST: &str = "manifest.toml";
pub const CONFIG: &str = "config.toml";
const BUNDLE_VERSION: u32 = 1;

/// Index of a bundle directory; all paths are relative to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    /// SHA-256 of `config.toml` as written.
    pub config_hash: String,
    pub base: String,
    #[serde(default)]
    pub priors: BTreeMap<String, String>,
    #[serde(default)]
    pub tree: Option<String>,
    #[serde(default)]
    pub adapted: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct Bundle {
    pub config: ExperimentConfig,
    pub artifacts: Artifacts,
    pub adapted: BTreeMap<String, Network>,
}

#[derive(Debug, Clone)]
pub struct LoadedBundle {
    pub bundle: Bundle,
    /// Non-fatal problems, e.g. a config edited after the bundle was written.
    pub warnings: Vec<String>,
}

pub fn prior_file_name(kind: AdapterKind) -> String {
    format!("prior_{}.bin", kind.name().to_ascii_lowercase())
}

fn check_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && !name.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::config(format!("bad adapted-model name {name:?}")))
    }
}

/// Writes config, base network, priors, tree and any adapted networks.
pub fn save_bundle(dir: &Path, bundle: &Bundle) -> Result<()> {
    fs::create_dir_all(dir)?;
    let config_text = bundle.config.to_toml();
    fs::write(dir.join(CONFIG), &config_text)?;
    save_network(&bundle.artifacts.base, &dir.join("base.bin"))?;
    let mut priors = BTreeMap::new();
    for (kind, prior) in &bundle.artifacts.priors {
        let name = prior_file_name(*kind);
        save_prior(prior, &dir.join(&name))?;
        priors.insert(kind.name().to_owned(), name);
    }
    let tree = match &bundle.artifacts.tree {
        Some(t) => {
            t.save(&dir.join("tree.txt"))?;
            Some("tree.txt".to_owned())
        }
        None => None,
    };
    let mut adapted = BTreeMap::new();
    if !bundle.adapted.is_empty() {
        fs::create_dir_all(dir.join("adapted"))?;
    }
    for (name, net) in &bundle.adapted {
        check_name(name)?;
        let rel = format!("adapted/{name}.bin");
        save_network(net, &dir.join(&rel))?;
        adapted.insert(name.clone(), rel);
    }
    let manifest = Manifest {
        version: BUNDLE_VERSION,
        config_hash: hash_text(&config_text),
        base: "base.bin".into(),
        priors,
        tree,
        adapted,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::invalid(e.to_string()))?;
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.display().to_string()),
        _ => Error::Io(e),
    })
}

/// Reads a bundle. Every prior the config's methods need must be present;
/// a config whose hash no longer matches the manifest only warns.
pub fn load_bundle(dir: &Path) -> Result<LoadedBundle> {
    let manifest_path = dir.join(MANIFEST);
    let manifest: Manifest = toml::from_str(&read_text(&manifest_path)?)
        .map_err(|e| Error::format(manifest_path.display().to_string(), e.to_string()))?;
    if manifest.version != BUNDLE_VERSION {
        return Err(Error::format(
            manifest_path.display().to_string(),
            format!("unsupported bundle version {}", manifest.version),
        ));
    }
    let config_text = read_text(&dir.join(CONFIG))?;
    let config = ExperimentConfig::from_toml(&config_text)?;
    let mut warnings = Vec::new();
    if hash_text(&config_text) != manifest.config_hash {
        warnings.push(format!(
            "{} changed since the bundle was written (hash mismatch)",
            dir.join(CONFIG).display()
        ));
    }
    let base = load_network(&dir.join(&manifest.base))?;
    let mut priors = BTreeMap::new();
    for (kind, file) in &manifest.priors {
        let kind: AdapterKind = kind.parse()?;
        priors.insert(kind, load_prior(&dir.join(file))?);
    }
    for kind in config.prior_kinds() {
        if !priors.contains_key(&kind) {
            return Err(Error::MissingFile(
                dir.join(prior_file_name(kind)).display().to_string(),
            ));
        }
    }
    let tree = match &manifest.tree {
        Some(f) => Some(TreeFile::load(&dir.join(f))?),
        None => None,
    };
    let mut adapted = BTreeMap::new();
    for (name, file) in &manifest.adapted {
        adapted.insert(name.clone(), load_network(&dir.join(file))?);
    }
    Ok(LoadedBundle {
        bundle: Bundle {
            config,
            artifacts: Artifacts { base, priors, tree },
            adapted,
        },
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Method;
    use crate::prior::GaussianPrior;

    fn sample() -> Bundle {
        let mut config = ExperimentConfig::default();
        config.plan.methods = vec![Method::MapLhn, Method::MapLhnHier];
        let base = Network::new(16, &[6, 4], 40, 3).unwrap();
        let mut priors = BTreeMap::new();
        priors.insert(
            AdapterKind::Lhn,
            GaussianPrior::standard(AdapterKind::Lhn, 20),
        );
        let mut adapted = BTreeMap::new();
        adapted.insert("spk0".to_owned(), Network::new(16, &[6, 4], 40, 4).unwrap());
        Bundle {
            config: config.clone(),
            artifacts: Artifacts {
                base,
                priors,
                tree: Some(super::super::run::default_tree(&config)),
            },
            adapted,
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = sample();
        save_bundle(dir.path(), &b).unwrap();
        let l = load_bundle(dir.path()).unwrap();
        assert!(l.warnings.is_empty());
        assert_eq!(l.bundle.config, b.config);
        assert_eq!(l.bundle.artifacts.base, b.artifacts.base);
        assert_eq!(l.bundle.artifacts.priors, b.artifacts.priors);
        assert_eq!(l.bundle.artifacts.tree, b.artifacts.tree);
        assert_eq!(l.bundle.adapted, b.adapted);
    }

    #[test]
    fn edited_config_warns() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(dir.path(), &sample()).unwrap();
        let p = dir.path().join(CONFIG);
        let mut text = fs::read_to_string(&p).unwrap();
        text.push_str("\n# edited\n");
        fs::write(&p, text).unwrap();
        let l = load_bundle(dir.path()).unwrap();
        assert_eq!(l.warnings.len(), 1);
        assert!(l.warnings[0].contains("hash mismatch"));
    }

    #[test]
    fn missing_prior_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = sample();
        b.artifacts.priors.clear();
        save_bundle(dir.path(), &b).unwrap();
        match load_bundle(dir.path()) {
            Err(Error::MissingFile(p)) => assert!(p.ends_with("prior_lhn.bin"), "{p}"),
            other => panic!("expected missing file, got {other:?}"),
        }
    }

    #[test]
    fn deleted_base_is_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(dir.path(), &sample()).unwrap();
        fs::remove_file(dir.path().join("base.bin")).unwrap();
        assert!(matches!(
            load_bundle(dir.path()),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn rejects_path_like_names() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = sample();
        b.adapted.insert("../x".into(), b.artifacts.base.clone());
        assert!(save_bundle(dir.path(), &b).is_err());
    }
}
