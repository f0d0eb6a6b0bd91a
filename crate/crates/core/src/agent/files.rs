use std::collections::BTreeMap;
use std::fs;
use std::path::{Component, Path};

use crate::evaluator::is_contained_relative;

/// Relative path → new content, or `None` to delete.
pub type FileOperations = BTreeMap<String, Option<String>>;

const RESERVED_DIRS: &[&str] = &[".git", ".kapso"];

fn check_path(worktree: &Path, relative: &str) -> Result<(), String> {
    if !is_contained_relative(relative) {
        return Err(format!("path {relative:?} escapes the worktree"));
    }
    let rel = Path::new(relative);
    let mut normals = rel.components().filter_map(|c| match c {
        Component::Normal(s) => Some(s),
        _ => None,
    });
    match normals.next() {
        None => return Err(format!("path {relative:?} names the worktree itself")),
        Some(first) if RESERVED_DIRS.iter().any(|r| first == *r) => {
            return Err(format!("path {relative:?} is inside a reserved directory"))
        }
        Some(_) => {}
    }
    // Symlinked ancestors could redirect writes outside the tree.
    let mut cursor = worktree.to_path_buf();
    for component in rel.components() {
        if let Component::Normal(part) = component {
            cursor.push(part);
            match fs::symlink_metadata(&cursor) {
                Ok(meta) if meta.file_type().is_symlink() => {
                    return Err(format!("path {relative:?} traverses a symlink"))
                }
                Ok(meta) if meta.is_dir() && cursor.as_path() == worktree.join(rel) => {
                    return Err(format!("path {relative:?} is a directory"))
                }
                _ => {}
            }
        }
    }
    Ok(())
}

/// Validate every operation, then apply them in path order.
///
/// Returns the paths whose on-disk state actually changed. Nothing is written
/// when any path fails validation.
pub fn apply_file_operations(worktree: &Path, ops: &FileOperations) -> Result<Vec<String>, String> {
    for path in ops.keys() {
        check_path(worktree, path)?;
    }
    let mut changed = Vec::new();
    for (path, content) in ops {
        let target = worktree.join(path);
        match content {
            Some(content) => {
                if fs::read(&target).ok().as_deref() == Some(content.as_bytes()) {
                    continue;
                }
                if let Some(parent) = target.parent() {
                    fs::create_dir_all(parent).map_err(|e| format!("cannot create {}: {e}", parent.display()))?;
                }
                fs::write(&target, content).map_err(|e| format!("cannot write {path}: {e}"))?;
                changed.push(path.clone());
            }
            None => {
                if target.is_file() {
                    fs::remove_file(&target).map_err(|e| format!("cannot delete {path}: {e}"))?;
                    changed.push(path.clone());
                }
            }
        }
    }
    Ok(changed)
}

/// Find a JSON object in free text: the whole text, a fenced ```json block,
/// or the outermost `{ ... }` span, in that order.
pub fn extract_json_object(text: &str) -> Option<serde_json::Map<String, serde_json::Value>> {
    let parse = |s: &str| serde_json::from_str::<serde_json::Map<String, serde_json::Value>>(s.trim()).ok();
    if let Some(obj) = parse(text) {
        return Some(obj);
    }
    let mut rest = text;
    while let Some(start) = rest.find("```") {
        let after = &rest[start + 3..];
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
        let body = &after[body_start..];
        let Some(end) = body.find("```") else { break };
        if let Some(obj) = parse(&body[..end]) {
            return Some(obj);
        }
        rest = &body[end + 3..];
    }
    let (start, end) = (text.find('{')?, text.rfind('}')?);
    (start < end).then(|| parse(&text[start..=end])).flatten()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ops(pairs: &[(&str, Option<&str>)]) -> FileOperations {
        pairs.iter().map(|(p, c)| (p.to_string(), c.map(str::to_string))).collect()
    }

    #[test]
    fn writes_and_reports_changes() {
        let dir = tempfile::tempdir().unwrap();
        let changed = apply_file_operations(dir.path(), &ops(&[("params.txt", Some("7")), ("src/a.py", Some("x"))])).unwrap();
        assert_eq!(changed, vec!["params.txt", "src/a.py"]);
        assert_eq!(fs::read_to_string(dir.path().join("params.txt")).unwrap(), "7");
        // identical content is not a change
        let changed = apply_file_operations(dir.path(), &ops(&[("params.txt", Some("7"))])).unwrap();
        assert!(changed.is_empty());
        let changed = apply_file_operations(dir.path(), &ops(&[("params.txt", None), ("gone.txt", None)])).unwrap();
        assert_eq!(changed, vec!["params.txt"]);
    }

    #[test]
    fn rejects_escapes_without_partial_application() {
        let dir = tempfile::tempdir().unwrap();
        let err = apply_file_operations(dir.path(), &ops(&[("a.txt", Some("1")), ("../escape", Some("x"))])).unwrap_err();
        assert!(err.contains("escape"));
        assert!(!dir.path().join("a.txt").exists());
        assert!(apply_file_operations(dir.path(), &ops(&[("/etc/x", Some("x"))])).is_err());
        assert!(apply_file_operations(dir.path(), &ops(&[(".git/config", Some("x"))])).is_err());
        assert!(apply_file_operations(dir.path(), &ops(&[(".kapso/experiment.json", Some("x"))])).is_err());
    }

    #[cfg(unix)]
    #[test]
    fn rejects_symlinked_ancestors() {
        let outside = tempfile::tempdir().unwrap();
        let dir = tempfile::tempdir().unwrap();
        std::os::unix::fs::symlink(outside.path(), dir.path().join("link")).unwrap();
        assert!(apply_file_operations(dir.path(), &ops(&[("link/pwned", Some("x"))])).is_err());
        assert!(!outside.path().join("pwned").exists());
    }

    #[test]
    fn json_extraction() {
        assert!(extract_json_object(r#"{"files": {}}"#).is_some());
        let fenced = "Here you go:\n```json\n{\"files\": {\"a\": \"1\"}, \"notes\": \"n\"}\n```\nbye";
        assert_eq!(extract_json_object(fenced).unwrap()["notes"], "n");
        assert!(extract_json_object("prefix {\"a\": 1} suffix").is_some());
        assert!(extract_json_object("no json here").is_none());
    }

    fn segment() -> impl Strategy<Value = String> {
        prop_oneof![
            Just("..".to_string()),
            Just(".".to_string()),
            Just("".to_string()),
            Just(".git".to_string()),
            "[a-z]{1,4}",
        ]
    }

    proptest! {
        #[test]
        fn adversarial_paths_never_escape(
            segs in prop::collection::vec(segment(), 1..5),
            absolute in any::<bool>(),
        ) {
            let root = tempfile::tempdir().unwrap();
            let worktree = root.path().join("tree");
            fs::create_dir(&worktree).unwrap();
            let mut path = segs.join("/");
            if absolute {
                path.insert(0, '/');
            }
            let _ = apply_file_operations(&worktree, &ops(&[(&path, Some("payload"))]));
            // nothing may appear next to the worktree
            let siblings: Vec<_> = fs::read_dir(root.path()).unwrap().collect();
            prop_assert_eq!(siblings.len(), 1);
            for entry in walkdir::WalkDir::new(&worktree) {
                let entry = entry.unwrap();
                prop_assert!(!entry.path().starts_with(worktree.join(".git")));
            }
        }
    }
}
