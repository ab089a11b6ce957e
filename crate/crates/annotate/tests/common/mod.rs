#![allow(dead_code)]

use vulnforge_core::augment::GatePolicy;
use vulnforge_core::{AugmentedInstance, DatasetManifest, Stage};

pub fn instance(i: usize, generated: bool) -> AugmentedInstance {
    AugmentedInstance {
        cve_id: format!("CVE-2021-{:05}", 10000 + i),
        description: format!("Issue {i} allows remote attackers to read files."),
        augmented_text: format!(
            "Issue {i} is a path traversal in the upload handler. Remote attackers can read arbitrary files. Upgrade to 4.{i} fixes it."
        ),
        sources: Vec::new(),
        label: None,
        grades: Vec::new(),
        generated: generated.then(|| format!("Path traversal in issue {i} lets attackers read files.")),
    }
}

pub fn manifest(n: usize) -> DatasetManifest {
    DatasetManifest::new(
        "anno",
        GatePolicy::single_use(),
        Stage::Refined,
        "2024-03-01T00:00:00Z".parse().unwrap(),
        (0..n).map(|i| instance(i, i % 2 == 0)).collect(),
    )
    .unwrap()
}
