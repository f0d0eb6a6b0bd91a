//! Portable knowledge packages.
//!
//! ```text
//! package.json         format version + sha256 of every other file
//! pages/<name>.json    one canonical page (edges included)
//! edges.json           flat edge list, derived from the pages
//! repos/manifest.json  repository entries
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::canonical::{from_json, to_canonical_pretty};

use super::{KnowledgeError, KnowledgePage, KnowledgeStore, RepoEntry, RetrievalConfig, TypedEdge};

pub const PACKAGE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackageManifest {
    pub format_version: u32,
    pub scoring_version: String,
    /// Relative path → lowercase hex sha256.
    pub checksums: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
struct EdgeRow {
    source_id: String,
    #[serde(flatten)]
    edge: TypedEdge,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// File name for a page id: readable prefix plus a hash suffix so distinct
/// ids never collide.
fn page_file_name(id: &str) -> String {
    let readable: String = id
        .chars()
        .take(60)
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{readable}-{}.json", &sha256_hex(id.as_bytes())[..12])
}

fn write(root: &Path, rel: &str, text: &str, checksums: &mut BTreeMap<String, String>) -> Result<(), KnowledgeError> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| KnowledgeError::io(parent, e))?;
    }
    fs::write(&path, text).map_err(|e| KnowledgeError::io(&path, e))?;
    checksums.insert(rel.to_string(), sha256_hex(text.as_bytes()));
    Ok(())
}

/// Write `store` into `dir`, which must be absent or empty.
pub fn export_package(store: &KnowledgeStore, dir: &Path) -> Result<PackageManifest, KnowledgeError> {
    if dir.exists() && fs::read_dir(dir).map_err(|e| KnowledgeError::io(dir, e))?.next().is_some() {
        return Err(KnowledgeError::InvalidPackage(format!("{} is not empty", dir.display())));
    }
    fs::create_dir_all(dir.join("pages")).map_err(|e| KnowledgeError::io(dir, e))?;
    let mut checksums = BTreeMap::new();
    for page in store.pages() {
        write(dir, &format!("pages/{}", page_file_name(&page.id)), &to_canonical_pretty(page)?, &mut checksums)?;
    }
    let edges: Vec<EdgeRow> = store.edges().into_iter().map(|(source_id, edge)| EdgeRow { source_id, edge }).collect();
    write(dir, "edges.json", &to_canonical_pretty(&edges)?, &mut checksums)?;
    let repos: Vec<&RepoEntry> = store.repos().collect();
    write(dir, "repos/manifest.json", &to_canonical_pretty(&repos)?, &mut checksums)?;
    let manifest = PackageManifest {
        format_version: PACKAGE_FORMAT_VERSION,
        scoring_version: store.config.scoring_version.clone(),
        checksums,
    };
    let path = dir.join("package.json");
    fs::write(&path, to_canonical_pretty(&manifest)?).map_err(|e| KnowledgeError::io(&path, e))?;
    Ok(manifest)
}

fn read_checked(dir: &Path, rel: &str, manifest: &PackageManifest) -> Result<String, KnowledgeError> {
    let expected = manifest
        .checksums
        .get(rel)
        .ok_or_else(|| KnowledgeError::InvalidPackage(format!("{rel} is not listed in package.json")))?;
    let path = dir.join(rel);
    let bytes = fs::read(&path).map_err(|e| KnowledgeError::io(&path, e))?;
    if &sha256_hex(&bytes) != expected {
        return Err(KnowledgeError::ChecksumMismatch(rel.to_string()));
    }
    String::from_utf8(bytes).map_err(|_| KnowledgeError::InvalidPackage(format!("{rel} is not UTF-8")))
}

/// Load a package written by [`export_package`] into a fresh store.
pub fn import_package(dir: &Path, config: RetrievalConfig) -> Result<KnowledgeStore, KnowledgeError> {
    let path = dir.join("package.json");
    let text = fs::read_to_string(&path).map_err(|e| KnowledgeError::io(&path, e))?;
    let manifest: PackageManifest = from_json(&text)?;
    if manifest.format_version != PACKAGE_FORMAT_VERSION {
        return Err(KnowledgeError::VersionMismatch { found: manifest.format_version, expected: PACKAGE_FORMAT_VERSION });
    }

    let pages_dir = dir.join("pages");
    let mut page_files: Vec<String> = match fs::read_dir(&pages_dir) {
        Ok(entries) => entries
            .filter_map(Result::ok)
            .map(|e| format!("pages/{}", e.file_name().to_string_lossy()))
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(KnowledgeError::io(&pages_dir, e)),
    };
    page_files.sort();
    let listed = manifest.checksums.keys().filter(|k| k.starts_with("pages/")).count();
    if listed != page_files.len() {
        return Err(KnowledgeError::InvalidPackage(format!(
            "package.json lists {listed} pages but {} page files exist",
            page_files.len()
        )));
    }

    let mut pages: Vec<KnowledgePage> = Vec::new();
    for rel in &page_files {
        pages.push(from_json(&read_checked(dir, rel, &manifest)?)?);
    }
    let edges: Vec<EdgeRow> = from_json(&read_checked(dir, "edges.json", &manifest)?)?;
    let repos: Vec<RepoEntry> = from_json(&read_checked(dir, "repos/manifest.json", &manifest)?)?;

    let mut derived: Vec<EdgeRow> = pages
        .iter()
        .flat_map(|p| p.edges.iter().map(|e| EdgeRow { source_id: p.id.clone(), edge: e.clone() }))
        .collect();
    derived.sort();
    let mut listed_edges = edges;
    listed_edges.sort();
    if derived != listed_edges {
        return Err(KnowledgeError::InvalidPackage("edges.json disagrees with page edges".into()));
    }

    let mut store = KnowledgeStore::new(config);
    for repo in repos {
        store.add_repo(repo)?;
    }
    store.index_pages(pages)?;
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::{EdgeType, PageType};

    fn sample() -> KnowledgeStore {
        let mut store = KnowledgeStore::default();
        store
            .add_repo(RepoEntry {
                repo_id: "r".into(),
                location: "https://example.invalid/r.git".into(),
                commit_id: "0123abcd".into(),
                tags: vec!["python".into()],
                summary: "a repo".into(),
                embedding: None,
            })
            .unwrap();
        store
            .index_pages(vec![
                KnowledgePage::new("r:impl:main.py", PageType::Implementation, "main", "print()")
                    .with_source("r")
                    .with_edge(EdgeType::RequiresEnv, "r:env"),
                KnowledgePage::new("r:env", PageType::Environment, "env", "numpy").with_source("r"),
                KnowledgePage::new("p/1", PageType::Principle, "idea", "do less").with_edge(EdgeType::RelatedRepo, "r"),
            ])
            .unwrap();
        store
    }

    #[test]
    fn round_trip_preserves_content() {
        let store = sample();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("pkg");
        export_package(&store, &out).unwrap();
        let back = import_package(&out, RetrievalConfig::default()).unwrap();
        assert_eq!(back.page_count(), 3);
        assert_eq!(back.edge_count(), store.edge_count());
        assert_eq!(back.repo_count(), 1);
        for page in store.pages() {
            assert_eq!(to_canonical_pretty(page).unwrap(), to_canonical_pretty(back.page(&page.id).unwrap()).unwrap());
        }
        assert_eq!(back.repo("r"), store.repo("r"));
    }

    #[test]
    fn empty_package_gives_empty_store() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("pkg");
        export_package(&KnowledgeStore::default(), &out).unwrap();
        let back = import_package(&out, RetrievalConfig::default()).unwrap();
        assert_eq!((back.page_count(), back.repo_count()), (0, 0));
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("pkg");
        export_package(&sample(), &out).unwrap();
        fs::write(out.join("repos/manifest.json"), "[]").unwrap();
        assert!(matches!(import_package(&out, RetrievalConfig::default()), Err(KnowledgeError::ChecksumMismatch(_))));
    }

    #[test]
    fn version_mismatch_names_both() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("pkg");
        export_package(&sample(), &out).unwrap();
        let text = fs::read_to_string(out.join("package.json")).unwrap().replace("\"format_version\": 1", "\"format_version\": 9");
        fs::write(out.join("package.json"), text).unwrap();
        let err = import_package(&out, RetrievalConfig::default()).unwrap_err();
        assert!(err.to_string().contains('9') && err.to_string().contains('1'), "{err}");
    }
}
