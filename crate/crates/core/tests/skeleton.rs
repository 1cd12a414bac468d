use motionedit_core::raster::Raster;
use motionedit_core::rng::fnv1a;
use motionedit_core::skeleton::*;
use motionedit_core::Error;
use proptest::prelude::*;

const GOLDEN_STICK_FIGURE: u64 = 0x50b3_1e71_5b19_949e;

fn figure(cx: f64, cy: f64, s: f64, phase: f64) -> (Raster, Raster) {
    let k = stick_figure(cx, cy, s, phase);
    let bones = default_bones();
    (render_keypoints(&k, 64, 64, &bones).unwrap(), body_mask(&k, 64, 64, &bones, 2.5))
}

fn rect(w: usize, h: usize, b: BBox) -> Raster {
    let mut r = Raster::new(w, h);
    for y in b.y..b.y + b.h {
        for x in b.x..b.x + b.w {
            r.set(x, y, 1);
        }
    }
    r
}

fn shift(r: &Raster, dx: i64, dy: i64) -> Raster {
    translate_nearest(r, dx as f64, dy as f64)
}

#[test]
fn golden_stick_figure() {
    let (s, _) = figure(32.0, 32.0, 12.0, 0.0);
    assert_eq!(fnv1a(&s.data), GOLDEN_STICK_FIGURE);
}

#[test]
fn bbox_matches_brute_force_on_l_shape() {
    let mut m = Raster::new(20, 16);
    for y in 3..14 {
        m.set(4, y, 1);
        m.set(5, y, 1);
    }
    for x in 4..17 {
        m.set(x, 13, 1);
    }
    let fg: Vec<_> = (0..16).flat_map(|y| (0..20).map(move |x| (x, y))).filter(|&(x, y)| m.get(x, y) != 0).collect();
    let xs = fg.iter().map(|p| p.0);
    let ys = fg.iter().map(|p| p.1);
    let (x0, x1) = (xs.clone().min().unwrap(), xs.max().unwrap());
    let (y0, y1) = (ys.clone().min().unwrap(), ys.max().unwrap());
    assert_eq!(bounding_rect(&m).unwrap(), BBox { x: x0, y: y0, w: x1 - x0 + 1, h: y1 - y0 + 1 });
}

#[test]
fn disk_center_is_center_of_symmetry() {
    let mut m = Raster::new(40, 40);
    let (cx, cy, r) = (17.0, 22.0, 9.0);
    for y in 0..40 {
        for x in 0..40 {
            if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r {
                m.set(x, y, 1);
            }
        }
    }
    let (x, y) = foreground_center(&m).unwrap();
    assert!((x - cx).abs() < 0.5 && (y - cy).abs() < 0.5);
}

#[test]
fn identity_reproduces_source() {
    for phase in [0.0, 0.7, 2.1] {
        let (s, m) = figure(30.0, 33.0, 11.0, phase);
        let a = align(&s, &m, &s, &m).unwrap();
        assert_eq!(a.skeleton, s);
        assert_eq!(a.mask, m);
        assert_eq!(a.report.scale, 1.0);
        assert_eq!(a.report.offset, [0.0, 0.0]);
        assert_eq!(a.report.v_trans, [0.0, 0.0]);
        // fixed point
        let b = align(&s, &m, &a.skeleton, &a.mask).unwrap();
        assert_eq!(b, a);
    }
}

#[test]
fn translation_fixtures_recover_offsets() {
    let (s, m) = figure(30.0, 30.0, 10.0, 0.4);
    for (dx, dy) in [(6, 6), (-6, -6), (5, -3), (-4, 7)] {
        let a = align(&s, &m, &shift(&s, dx, dy), &shift(&m, dx, dy)).unwrap();
        assert_eq!(a.report.offset, [-dx as f64, -dy as f64], "shift ({dx}, {dy})");
        assert_eq!(a.skeleton, s);
        assert_eq!(a.mask, m);
    }
}

#[test]
fn hand_traced_resize() {
    let src = BBox { x: 10, y: 14, w: 40, h: 100 };
    let refb = BBox { x: 60, y: 20, w: 25, h: 50 };
    let (ms, mr) = (rect(128, 128, src), rect(128, 128, refb));
    let a = align(&ms, &ms, &mr, &mr).unwrap();
    let r = &a.report;
    assert_eq!(r.ratio, 0.5);
    assert_eq!(r.scale, 2.0);
    assert_eq!(r.scaled_width, 50);
    // 50 ≥ 40: right-aligned paste, 10 columns to the left
    assert_eq!(r.paste_x, 0);
    assert!(!r.clamped);
    // source center x 29.5, pasted center x 24.5
    assert_eq!(r.v_trans, [5.0, 0.0]);
    assert_eq!(bounding_rect(&a.mask).unwrap(), BBox { x: 5, y: 14, w: 50, h: 100 });
}

#[test]
fn narrow_reference_pastes_at_source_left_edge() {
    let src = BBox { x: 20, y: 10, w: 30, h: 40 };
    let refb = BBox { x: 3, y: 2, w: 10, h: 20 };
    let a = align(&rect(64, 64, src), &rect(64, 64, src), &rect(64, 64, refb), &rect(64, 64, refb)).unwrap();
    assert_eq!(a.report.scaled_width, 20);
    assert_eq!(a.report.paste_x, 20);
    assert_eq!(a.report.v_trans, [5.0, 0.0]);
    assert_eq!(bounding_rect(&a.mask).unwrap(), BBox { x: 25, y: 10, w: 20, h: 40 });
}

#[test]
fn overflowing_paste_is_clamped() {
    let src = BBox { x: 2, y: 10, w: 10, h: 40 };
    let refb = BBox { x: 10, y: 5, w: 40, h: 20 };
    let (ms, mr) = (rect(64, 64, src), rect(64, 64, refb));
    let a = align(&ms, &ms, &mr, &mr).unwrap();
    assert_eq!(a.report.scaled_width, 80);
    assert_eq!(a.report.paste_x, -68);
    assert!(a.report.clamped);
    assert_eq!((a.skeleton.width, a.skeleton.height), (64, 64));
}

#[test]
fn errors() {
    let (s, m) = figure(30.0, 30.0, 10.0, 0.0);
    let empty = Raster::new(64, 64);
    assert!(matches!(align(&s, &empty, &s, &m), Err(Error::EmptyForeground)));
    assert!(matches!(align(&s, &m, &s, &empty), Err(Error::EmptyForeground)));
    assert!(align(&s, &m, &Raster::new(32, 64), &m).is_err());
    // a one-row reference scaled to a one-row source still has width
    let thin = rect(64, 64, BBox { x: 0, y: 0, w: 1, h: 60 });
    let row = rect(64, 64, BBox { x: 0, y: 0, w: 1, h: 1 });
    assert!(matches!(align(&row, &row, &thin, &thin), Err(Error::Mask(_))));
}

#[test]
fn clip_errors_name_the_frame() {
    let (s, m) = figure(30.0, 30.0, 10.0, 0.0);
    let empty = Raster::new(64, 64);
    let src_s = vec![s.clone(); 3];
    let src_m = vec![m.clone(); 3];
    let ref_m = vec![m.clone(), m.clone(), empty];
    let err = align_clip(&src_s, &src_m, &src_s, &ref_m, AlignMode::PerFrame).unwrap_err();
    assert!(matches!(err, Error::Frame { frame: 2, .. }), "{err}");
    let ok = align_clip(&src_s, &src_m, &src_s, &src_m, AlignMode::FirstFrame).unwrap();
    assert!(ok.iter().all(|a| a.skeleton == s));
}

#[test]
fn first_frame_mode_reuses_frame_zero_geometry() {
    let (s0, m0) = figure(30.0, 30.0, 10.0, 0.0);
    let (s1, m1) = figure(30.0, 30.0, 10.0, 1.0);
    let refs = [shift(&s0, 4, 0), shift(&s1, 4, 0)];
    let refm = [shift(&m0, 4, 0), shift(&m1, 4, 0)];
    let per = align_clip(&[s0.clone(), s1.clone()], &[m0.clone(), m1.clone()], &refs, &refm, AlignMode::PerFrame).unwrap();
    let first = align_clip(&[s0.clone(), s1.clone()], &[m0.clone(), m1.clone()], &refs, &refm, AlignMode::FirstFrame).unwrap();
    assert_eq!(per[0], first[0]);
    assert_eq!(first[1].report, first[0].report);
}

fn blob(cx: f64, cy: f64, rx: f64, ry: f64) -> Raster {
    let mut m = Raster::new(64, 64);
    for y in 0..64 {
        for x in 0..64 {
            if ((x as f64 - cx) / rx).powi(2) + ((y as f64 - cy) / ry).powi(2) <= 1.0 {
                m.set(x, y, 1);
            }
        }
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn center_and_scale_invariants(
        scx in 20.0f64..44.0, scy in 22.0f64..42.0, srx in 2.0f64..8.0, sry in 6.0f64..16.0,
        rcx in 16.0f64..48.0, rcy in 16.0f64..48.0, rrx in 2.0f64..10.0, rry in 3.0f64..14.0,
    ) {
        let (ms, mr) = (blob(scx, scy, srx, sry), blob(rcx, rcy, rrx, rry));
        let sb = bounding_rect(&ms).unwrap();
        let a = align(&ms, &ms, &mr, &mr).unwrap();
        let r = &a.report;
        // fixtures whose result stays on the canvas
        let ob = bounding_rect(&a.mask).unwrap();
        prop_assume!(!r.clamped && ob.x > 0 && ob.x + ob.w < 64);
        let (c_s, c_o) = (foreground_center(&ms).unwrap(), foreground_center(&a.mask).unwrap());
        prop_assert!((c_s.0 - c_o.0).abs() <= 0.5 && (c_s.1 - c_o.1).abs() <= 0.5, "{c_s:?} vs {c_o:?}");
        prop_assert_eq!(ob.h, sb.h);
        prop_assert!((ob.w as f64 - r.ratio * sb.h as f64).abs() <= 1.0);
        prop_assert!(a.mask.is_binary());
    }

    #[test]
    fn identity_is_exact_for_any_figure(cx in 14.0f64..50.0, cy in 22.0f64..42.0, s in 4.0f64..10.0, phase in 0.0f64..6.3) {
        let (sk, m) = figure(cx, cy, s, phase);
        let a = align(&sk, &m, &sk, &m).unwrap();
        prop_assert_eq!(&a.skeleton, &sk);
        prop_assert_eq!(&a.mask, &m);
    }
}
