use mde_core::dataio::{
    encode_idx_images, load_idx, load_manifest, parse_idx_images, parse_idx_labels, read_png, resize,
    synthetic_dataset, write_png, write_png_grid, ResizeMode, SyntheticKind,
};
use mde_core::{Error, Tensor};

fn idx_bytes() -> Vec<u8> {
    let mut b = Vec::new();
    for v in [0x0803u32, 2, 4, 4] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend((0..32u32).map(|i| (i * 8) as u8));
    b[16] = 0;
    b[31] = 255;
    b
}

#[test]
fn hand_built_idx_decodes() {
    let (rows, cols, images) = parse_idx_images(&idx_bytes()).unwrap();
    assert_eq!((rows, cols, images.len()), (4, 4, 2));
    assert_eq!(images[0].shape(), &[3, 4, 4]);
    assert_eq!(images[0].data()[0], 0.0);
    assert_eq!(images[0].data()[15], 1.0);
    assert!((images[0].data()[1] - 8.0 / 255.0).abs() < 1e-7);
    assert!((images[1].data()[0] - 128.0 / 255.0).abs() < 1e-7);
    // replicated channels
    assert_eq!(images[1].data()[..16], images[1].data()[16..32]);
    assert_eq!(images[1].data()[..16], images[1].data()[32..]);
}

#[test]
fn truncated_idx_is_a_parse_error() {
    let mut b = idx_bytes();
    b.pop();
    match parse_idx_images(&b) {
        Err(Error::Parse { offset, .. }) => assert!(offset >= 16),
        other => panic!("expected parse error, got {other:?}"),
    }
    let mut extra = idx_bytes();
    extra.push(0);
    assert!(parse_idx_images(&extra).is_err());
    let mut bad_magic = idx_bytes();
    bad_magic[3] = 0x01;
    assert!(matches!(parse_idx_images(&bad_magic), Err(Error::Parse { offset: 0, .. })));
    assert!(parse_idx_images(&idx_bytes()[..10]).is_err());
}

#[test]
fn idx_files_with_labels() {
    let dir = tempfile::tempdir().unwrap();
    let ip = dir.path().join("img.idx");
    let lp = dir.path().join("lbl.idx");
    std::fs::write(&ip, idx_bytes()).unwrap();
    let mut lb = Vec::new();
    lb.extend_from_slice(&0x0801u32.to_be_bytes());
    lb.extend_from_slice(&2u32.to_be_bytes());
    lb.extend_from_slice(&[3, 7]);
    std::fs::write(&lp, &lb).unwrap();
    assert_eq!(parse_idx_labels(&lb).unwrap(), vec![3, 7]);
    let ds = load_idx(&ip, Some(&lp)).unwrap();
    assert_eq!(ds.labels, Some(vec![3, 7]));

    let reencoded = encode_idx_images(&ds.images).unwrap();
    assert_eq!(reencoded, idx_bytes());
}

#[test]
fn bilinear_checkerboard_matches_hand_interpolation() {
    let img = Tensor::new(vec![1, 2, 2], vec![1.0f32, 0.0, 0.0, 1.0]).unwrap();
    let out = resize(&img, 4, 4, ResizeMode::Bilinear).unwrap();
    // sample positions 0, 0.25, 0.75, 1 along each axis (half-pixel centres, clamped)
    #[rustfmt::skip]
    let expect = [
        1.0,   0.75,  0.25,  0.0,
        0.75,  0.625, 0.375, 0.25,
        0.25,  0.375, 0.625, 0.75,
        0.0,   0.25,  0.75,  1.0,
    ];
    for (a, b) in out.data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-6, "{:?}", out.data());
    }
    let near = resize(&img, 4, 4, ResizeMode::Nearest).unwrap();
    assert!(near.data().iter().all(|&v| v == 0.0 || v == 1.0));
}

#[test]
fn synthetic_sets_are_deterministic_and_in_range() {
    for kind in [SyntheticKind::Stripes, SyntheticKind::Blobs, SyntheticKind::Gradients] {
        let a = synthetic_dataset(kind, 5, 16, 42).unwrap();
        let b = synthetic_dataset(kind, 5, 16, 42).unwrap();
        let c = synthetic_dataset(kind, 5, 16, 43).unwrap();
        assert_eq!(a.images, b.images);
        assert_ne!(a.images, c.images);
        for img in &a.images {
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn stripes_have_two_value_palette() {
    let ds = synthetic_dataset(SyntheticKind::Stripes, 20, 16, 1).unwrap();
    for img in &ds.images {
        let mut colors: Vec<[u32; 3]> = (0..256)
            .map(|p| [0, 1, 2].map(|c| img.data()[c * 256 + p].to_bits()))
            .collect();
        colors.sort();
        colors.dedup();
        assert_eq!(colors.len(), 2);
    }
}

#[test]
fn png_round_trip_and_pure_red() {
    let dir = tempfile::tempdir().unwrap();
    let img = Tensor::from_fn(vec![3, 5, 7], |i| ((i * 37) % 101) as f32 / 100.0);
    let p = dir.path().join("x.png");
    write_png(&img, &p).unwrap();
    let back = read_png(&p).unwrap();
    for (a, b) in img.data().iter().zip(back.data()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
    }

    let red = Tensor::from_fn(vec![3, 2, 2], |i| if i < 4 { 1.0f32 } else { 0.0 });
    let rp = dir.path().join("red.png");
    write_png(&red, &rp).unwrap();
    let mut dec = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(&rp).unwrap()))
        .read_info()
        .unwrap();
    let mut buf = vec![0; dec.output_buffer_size().unwrap()];
    dec.next_frame(&mut buf).unwrap();
    assert_eq!(&buf[..3], &[255, 0, 0]);
}

#[test]
fn grid_png_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let imgs: Vec<_> = (0..6).map(|_| Tensor::full(vec![3, 8, 10], 0.5f32)).collect();
    let p = dir.path().join("g.png");
    write_png_grid(&imgs, 3, &p).unwrap();
    assert_eq!(read_png(&p).unwrap().shape(), &[3, 16, 30]);
    let mismatched = vec![Tensor::full(vec![3, 8, 10], 0.5f32), Tensor::full(vec![3, 8, 9], 0.5f32)];
    assert!(write_png_grid(&mismatched, 2, &p).is_err());
}

#[test]
fn malformed_png_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.png");
    std::fs::write(&p, b"not a png").unwrap();
    assert!(matches!(read_png(&p), Err(Error::Png(_))));
    assert!(matches!(read_png(&dir.path().join("missing.png")), Err(Error::Io { .. })));
}

#[test]
fn manifest_loading_resizes() {
    let dir = tempfile::tempdir().unwrap();
    for (i, size) in [(0, 12), (1, 20)] {
        write_png(&Tensor::full(vec![3, size, size], 0.25f32), &dir.path().join(format!("{i}.png"))).unwrap();
    }
    let m = dir.path().join("list.txt");
    std::fs::write(&m, "# faces\n0.png\n\n1.png\n").unwrap();
    let ds = load_manifest(&m, Some(16)).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!((ds.height, ds.width), (16, 16));
}
