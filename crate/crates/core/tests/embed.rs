use std::path::Path;

use guda::embed::{sidecar_path, verify_sidecar, write_embeddings, write_sidecar, EmbeddingMatrix};

fn fill(root: &Path) {
    std::fs::create_dir_all(root.join("corpora")).unwrap();
    std::fs::create_dir_all(root.join("embeddings")).unwrap();
    std::fs::write(root.join("corpora/x.txt"), "a b\nc\n").unwrap();
    let emb = root.join("embeddings/x.emb");
    write_embeddings(&EmbeddingMatrix::new(2, 1, vec![0.5, -1.0]).unwrap(), &emb).unwrap();
    write_sidecar(&emb, &root.join("corpora/x.txt")).unwrap();
}

#[test]
fn sidecar_is_location_independent() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("deeper/b"));
    fill(&a);
    fill(&b);
    let side = |r: &Path| std::fs::read(sidecar_path(&r.join("embeddings/x.emb"))).unwrap();
    assert_eq!(side(&a), side(&b));

    let moved = dir.path().join("moved");
    std::fs::rename(&a, &moved).unwrap();
    assert!(verify_sidecar(&moved.join("embeddings/x.emb")).unwrap());
    std::fs::write(moved.join("corpora/x.txt"), "a b\nd\n").unwrap();
    assert!(!verify_sidecar(&moved.join("embeddings/x.emb")).unwrap());
}
