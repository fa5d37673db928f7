use puzzleseg::error::Error;
use puzzleseg::io::{load_annotations, load_checkpoint, save_checkpoint, AnnotationFormat};
use puzzleseg::msgcn::{AdjacencyScale, ModelConfig, MsgcnModel, Variant};
use puzzleseg::synth::{gen_dataset, Dataset, SynthConfig};

#[test]
fn dataset_round_trips_through_jsonl() {
    let ds = gen_dataset(3, 20, &SynthConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
    let test = load_annotations(&dir.path().join("test.jsonl"), AnnotationFormat::Jsonl).unwrap();
    assert_eq!(test, ds.test);
}

#[test]
fn checkpoint_round_trip_keeps_every_parameter() {
    for variant in [Variant::Full, Variant::NoGeometry, Variant::SingleCosine, Variant::NoAppearance] {
        let cfg = ModelConfig {
            d: 6,
            head_hidden: 5,
            variant,
            adjacency: AdjacencyScale::MeanByN,
            seed: 9,
            ..ModelConfig::default()
        };
        let model = MsgcnModel::new(cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&path, &model).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(back.flat(), model.flat());
        let again = dir.path().join("again.json");
        save_checkpoint(&again, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }
}

#[test]
fn annotation_files_with_bom_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let quad = dir.path().join("gt_img_12.txt");
    std::fs::write(&quad, "\u{feff}10,10,50,10,50,30,10,30,hello, world\n\n60,60,90,60,90,80,60,80,###\n").unwrap();
    let scenes = load_annotations(&quad, AnnotationFormat::IcdarQuad).unwrap();
    assert_eq!(scenes.len(), 1);
    assert_eq!(scenes[0].id, 12);
    assert_eq!(scenes[0].instances.len(), 2);
    assert!((scenes[0].instances[0].polygon.area() - 800.0).abs() < 1e-9);

    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "10,10,50,10,50,30,10,30,ok\n1,2,3\n").unwrap();
    match load_annotations(&bad, AnnotationFormat::IcdarQuad) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a parse error, got {other:?}"),
    }

    let ctw = dir.path().join("0007.txt");
    let coords: Vec<String> = (0..7)
        .flat_map(|k| [format!("{}", 10 * k), "0".into()])
        .chain((0..7).rev().flat_map(|k| [format!("{}", 10 * k), "20".into()]))
        .collect();
    std::fs::write(&ctw, coords.join(",") + "\n").unwrap();
    let scenes = load_annotations(&ctw, AnnotationFormat::Ctw14pt).unwrap();
    assert_eq!(scenes[0].id, 7);
    assert_eq!(scenes[0].instances[0].polygon.len(), 14);
    assert!((scenes[0].instances[0].polygon.area() - 1200.0).abs() < 1e-9);
}

#[test]
fn missing_files_are_io_errors() {
    let err = load_annotations(std::path::Path::new("/nonexistent/x.txt"), AnnotationFormat::IcdarQuad).unwrap_err();
    assert!(err.is_io());
}
