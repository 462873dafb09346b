use std::path::Path;
use std::process::{Command, Output};

use dmroad::netgraph::{read_graph, write_graph};
use dmroad::raster::save_f32_grid;
use dmroad::{DensityField, GeoGraph};

fn dmroad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmroad"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn segment(x0: f64, y0: f64, x1: f64, y1: f64) -> GeoGraph {
    let mut g = GeoGraph::new();
    let a = g.add_vertex(x0, y0);
    let b = g.add_vertex(x1, y1);
    g.add_edge(a, b).unwrap();
    g
}

fn detour() -> GeoGraph {
    let mut g = GeoGraph::new();
    let a = g.add_vertex(0.0, 0.0);
    let m = g.add_vertex(50.0, 1100f64.sqrt());
    let b = g.add_vertex(100.0, 0.0);
    g.add_edge(a, m).unwrap();
    g.add_edge(m, b).unwrap();
    g
}

fn ridge_field() -> DensityField {
    DensityField::new(5, 1, vec![0.2, 0.9, 0.3, 0.7, 0.1]).unwrap()
}

#[test]
fn score_identity_and_empty() {
    let dir = tempfile::tempdir().unwrap();
    let (a, e) = (dir.path().join("a.graph"), dir.path().join("e.graph"));
    write_graph(&detour(), &a).unwrap();
    write_graph(&GeoGraph::new(), &e).unwrap();

    let o = dmroad(&["score", s(&a), s(&a)]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "APLS\t1.0\tSH\t0.0\n");

    let o = dmroad(&["score", s(&a), s(&e)]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "APLS\t0.0\tSH\t500.0\n");

    let o = dmroad(&["score", s(&a), s(&e), "--max", "42"]);
    assert_eq!(stdout(&o), "APLS\t0.0\tSH\t42.0\n");
}

#[test]
fn score_detour() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.graph"), dir.path().join("b.graph"));
    write_graph(&segment(0.0, 0.0, 100.0, 0.0), &a).unwrap();
    write_graph(&detour(), &b).unwrap();
    let o = dmroad(&["score", s(&a), s(&b), "--verbose"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let first: Vec<&str> = out.lines().next().unwrap().split('\t').collect();
    assert_eq!(first[0], "APLS");
    let v: f64 = first[1].parse().unwrap();
    assert!((v - 0.81632).abs() < 1e-4, "{v}");
    assert_eq!(out.lines().filter(|l| l.starts_with("pair\t")).count(), 2);
}

#[test]
fn unreadable_graph_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.graph");
    std::fs::write(&bad, "not a graph").unwrap();
    let o = dmroad(&["score", s(&bad), s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
    let o = dmroad(&["score", "/nonexistent/a.graph", s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn reconstruct_ridge() {
    let dir = tempfile::tempdir().unwrap();
    let (f, out) = (dir.path().join("row.f32grid"), dir.path().join("row.graph"));
    save_f32_grid(&ridge_field(), &f).unwrap();
    let o = dmroad(&["reconstruct", s(&f), "--delta", "0.2", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o), "vertices\t3\tedges\t2\tarcs\t1\n");
    let g = read_graph(&out).unwrap();
    let mut xs: Vec<f64> = g.points().iter().map(|p| p.x).collect();
    xs.sort_by(f64::total_cmp);
    assert_eq!(xs, vec![1.0, 2.0, 3.0]);

    let o = dmroad(&["reconstruct", s(&f), "--delta", "1.1", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("parameter"));
}

#[test]
fn preset_matches_explicit_flags() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("f.f32grid");
    let field = DensityField::from_fn(40, 30, |x, y| {
        let d = (y as f32 - 15.0).abs();
        let bump = if x < 20 { 0.9 } else { 0.7 } - 0.01 * (x as f32 - 20.0).abs();
        (bump - 0.15 * d).max(0.0)
    });
    save_f32_grid(&field, &f).unwrap();
    let (a, b) = (dir.path().join("a.graph"), dir.path().join("b.graph"));
    let o1 = dmroad(&["reconstruct", s(&f), "--delta", "0.12", "--tau", "0.4", "--out", s(&a)]);
    let o2 = dmroad(&["reconstruct", s(&f), "--preset", "aoi2", "--out", s(&b)]);
    assert!(o1.status.success() && o2.status.success());
    assert!(String::from_utf8_lossy(&o2.stderr).contains("warning"));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let o = dmroad(&["reconstruct", s(&f), "--preset", "nowhere", "--out", s(&b)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_flags_are_rejected() {
    let o = dmroad(&["score", "a", "b", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    let o = dmroad(&["--help"]);
    assert!(o.status.success());
}

#[test]
fn help_lists_defaults() {
    for sub in ["reconstruct", "score", "rasterize", "enhance", "pipeline", "render", "segment-baseline", "synth"] {
        let o = dmroad(&[sub, "--help"]);
        assert!(o.status.success());
        let text = stdout(&o);
        // every optional flag documents a default, on its own line or in
        // the indented description that follows it
        let lines: Vec<&str> = text.lines().map(str::trim).collect();
        for (i, line) in lines.iter().enumerate().filter(|(_, l)| l.starts_with("--")) {
            let name = line.split_whitespace().next().unwrap();
            if ["--help", "--out", "--workdir", "--dataset", "--state", "--width", "--height"].contains(&name) {
                continue;
            }
            let described = lines[i..]
                .iter()
                .take_while(|l| *l == line || !(l.starts_with('-') || l.is_empty()))
                .any(|l| l.contains("[default"));
            assert!(described, "{sub} {name} has no documented default");
        }
    }
}

#[test]
fn rasterize_and_render() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g.graph");
    write_graph(&segment(2.0, 5.0, 17.0, 5.0), &g).unwrap();
    let mask = dir.path().join("m.pgm");
    let o = dmroad(&["rasterize", s(&g), "--width", "20", "--height", "10", "--half-width", "1", "--out", s(&mask)]);
    assert!(o.status.success());
    // three rows of sixteen pixels plus the two rounded caps
    assert_eq!(stdout(&o), "pixels\t50\n");

    let e = dir.path().join("e.graph");
    write_graph(&GeoGraph::new(), &e).unwrap();
    let (svg1, svg2) = (dir.path().join("1.svg"), dir.path().join("2.svg"));
    assert!(dmroad(&["render", s(&mask), s(&g), s(&e), "--out", s(&svg1)]).status.success());
    assert!(dmroad(&["render", s(&mask), s(&g), s(&e), "--out", s(&svg2)]).status.success());
    let text = std::fs::read_to_string(&svg1).unwrap();
    assert_eq!(text, std::fs::read_to_string(&svg2).unwrap());
    assert_eq!(text.matches("<g ").count(), 1);
    assert!(text.contains("2.5,5.5 17.5,5.5"));

    let only = dir.path().join("3.svg");
    assert!(dmroad(&["render", s(&mask), s(&e), "--out", s(&only)]).status.success());
    let text = std::fs::read_to_string(&only).unwrap();
    assert!(text.contains("<image") && !text.contains("<polyline"));
}

#[test]
fn enhance_writes_tips() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("f.f32grid");
    // a bright horizontal ridge ending in the middle of the image
    let field = DensityField::from_fn(40, 30, |x, y| if y.abs_diff(15) <= 1 && x <= 20 { 0.8 } else { 0.0 });
    save_f32_grid(&field, &f).unwrap();
    let (out, tips) = (dir.path().join("e.f32grid"), dir.path().join("tips.txt"));
    let o = dmroad(&["enhance", s(&f), "--window", "9", "--out", s(&out), "--tips-out", s(&tips)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o), "tips\t1\n");
    assert_eq!(std::fs::read_to_string(&tips).unwrap().lines().count(), 1);
}

#[test]
fn pipeline_with_external_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = dmroad(&["synth", "--count", "6", "--size", "64", "--seed", "3", "--out", s(&data)]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "images\t6\n");

    let run = |state: &Path, external: bool| {
        let mut args = vec![
            "pipeline".to_string(),
            "--dataset".into(),
            s(&data).into(),
            "--state".into(),
            s(state).into(),
            "--iterations".into(),
            "2".into(),
            "--epsilon".into(),
            "0".into(),
        ];
        if external {
            args.extend([
                "--segmenter".into(),
                env!("CARGO_BIN_EXE_dmroad").into(),
                "--segmenter-arg".into(),
                "segment-baseline".into(),
            ]);
        }
        let o = Command::new(env!("CARGO_BIN_EXE_dmroad")).args(&args).output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out_a = run(&a, false);
    let out_b = run(&b, true);
    assert_eq!(out_a, out_b);
    assert_eq!(out_a.lines().count(), 4);
    assert!(out_a.starts_with("iteration\tapls\tsh\tchange\n0\t"));
    for i in 0..=2 {
        let name = format!("iter_{i:04}");
        let sa = std::fs::read(a.join(&name).join("scores.tsv")).unwrap();
        let sb = std::fs::read(b.join(&name).join("scores.tsv")).unwrap();
        assert_eq!(sa, sb);
    }
}

#[test]
fn failing_segmenter_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(dmroad(&["synth", "--count", "3", "--size", "48", "--out", s(&data)]).status.success());
    let state = dir.path().join("state");
    let o = dmroad(&["pipeline", "--dataset", s(&data), "--state", s(&state), "--segmenter", "/bin/false"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("segmenter"));
    assert!(state.join("iter_0000").is_dir());
    assert!(!state.join("iter_0001").exists());
}
