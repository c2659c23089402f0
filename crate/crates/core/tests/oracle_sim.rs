use ndarray::Array2;
use proptest::prelude::*;
use radiomap::domain::{validate_scene, BaseStation, EnvironmentScene};
use radiomap::ingest::{encode_gray, EncodeConfig};
use radiomap::sim::*;

fn open_scene(n: usize, bs: (usize, usize)) -> EnvironmentScene {
    EnvironmentScene::empty(n, BaseStation::at(bs.0, bs.1)).unwrap()
}

fn with_masks(n: usize, s: &[(usize, usize)], d: &[(usize, usize)], bs: (usize, usize)) -> EnvironmentScene {
    let mut sm = Array2::zeros((n, n));
    let mut dm = Array2::zeros((n, n));
    s.iter().for_each(|&p| sm[p] = 1);
    d.iter().for_each(|&p| dm[p] = 1);
    EnvironmentScene::new(sm, dm, BaseStation::at(bs.0, bs.1)).unwrap()
}

#[test]
fn generator_is_deterministic() {
    let a = generate_scene(7, 64, 10, 5).unwrap();
    let b = generate_scene(7, 64, 10, 5).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, generate_scene(8, 64, 10, 5).unwrap());
}

#[test]
fn no_obstacles_means_empty_masks() {
    let s = generate_scene(3, 32, 0, 0).unwrap();
    assert!(s.static_mask().iter().all(|&v| v == 0));
    assert!(s.dynamic_mask().iter().all(|&v| v == 0));
}

#[test]
fn generated_scene_validates() {
    let s = generate_scene(1, 64, 10, 5).unwrap();
    assert!(s.static_mask().iter().any(|&v| v == 1));
    assert!(s.dynamic_mask().iter().any(|&v| v == 1));
    validate_scene(s).unwrap();
}

#[test]
fn building_interior_is_black() {
    let s = generate_scene(1, 64, 10, 5).unwrap();
    let rm = compute_pathloss(&s, &OracleConfig::default()).unwrap();
    for ((r, c), &g) in rm.gray.indexed_iter() {
        if s.is_building(r, c) {
            assert_eq!(g, 0.0);
        }
    }
    rm.check_against(&s).unwrap();
}

#[test]
fn transmitter_cell_is_white() {
    let s = generate_scene(11, 64, 10, 5).unwrap();
    let rm = compute_pathloss(&s, &OracleConfig::default()).unwrap();
    assert_eq!(rm.gray[[s.bs().row, s.bs().col]], 1.0);
    assert!(rm.gray.iter().all(|&g| g <= 1.0));
}

#[test]
fn hand_evaluated_free_space_cell() {
    let cfg = OracleConfig::default();
    let s = open_scene(32, (5, 5));
    // 10 cells away on a row: 40 + 20 log10(10) = 60 dB.
    assert_eq!(raw_loss_db(&s, &cfg, 5, 15), 60.0);
    // Encoder spans 40..187 dB over 256 levels.
    let level = ((187.0 - 60.0) / 147.0 * 255.0f64).round();
    let rm = compute_pathloss(&s, &cfg).unwrap();
    assert_eq!(rm.gray[[5, 15]], level / 255.0);
    assert_eq!(level, 220.0);
    assert_eq!(rm.pathloss_db[[5, 15]], 60.0);
}

#[test]
fn floor_truncates() {
    let cfg = OracleConfig {
        floor_db: 50.0,
        ..OracleConfig::default()
    };
    let s = open_scene(64, (0, 0));
    let rm = compute_pathloss(&s, &cfg).unwrap();
    assert_eq!(rm.pathloss_db[[63, 63]], 50.0);
    assert_eq!(rm.gray[[63, 63]], 0.0);
}

#[test]
fn vehicles_attenuate_but_do_not_block() {
    let cfg = OracleConfig::default();
    let behind = (10, 20);
    let dynamic = with_masks(32, &[], &[(10, 15)], (10, 10));
    let stat = with_masks(32, &[(10, 15)], &[], (10, 10));
    let free = open_scene(32, (10, 10));
    let l_dyn = raw_loss_db(&dynamic, &cfg, behind.0, behind.1);
    let l_free = raw_loss_db(&free, &cfg, behind.0, behind.1);
    assert!((l_dyn - l_free - 3.0).abs() < 1e-12);
    assert!(raw_loss_db(&stat, &cfg, behind.0, behind.1).is_infinite());
    let g_dyn = compute_pathloss(&dynamic, &cfg).unwrap().gray;
    let g_stat = compute_pathloss(&stat, &cfg).unwrap().gray;
    assert!(g_dyn[behind] > g_stat[behind]);
    assert_eq!(g_stat[behind], 0.0);
}

#[test]
fn oracle_rejects_bad_config() {
    let s = open_scene(16, (0, 0));
    for cfg in [
        OracleConfig {
            exponent_n: 0.0,
            ..Default::default()
        },
        OracleConfig {
            dynamic_atten_db_per_cell: 0.0,
            ..Default::default()
        },
        OracleConfig {
            floor_db: 30.0,
            ..Default::default()
        },
    ] {
        assert!(matches!(compute_pathloss(&s, &cfg), Err(SimError::InvalidConfig(_))));
    }
}

fn cell_of(p: (f64, f64)) -> (usize, usize) {
    (p.0.floor() as usize, p.1.floor() as usize)
}

/// Line integral of vehicle attenuation along the centre-to-centre segment,
/// in units of cells along the major axis, excluding both endpoint cells.
fn supersampled_vehicle_loss(scene: &EnvironmentScene, from: (usize, usize), to: (usize, usize), atten: f64) -> f64 {
    const SAMPLES: usize = 4000;
    let a = (from.0 as f64 + 0.5, from.1 as f64 + 0.5);
    let b = (to.0 as f64 + 0.5, to.1 as f64 + 0.5);
    let major = (to.0 as f64 - from.0 as f64).abs().max((to.1 as f64 - from.1 as f64).abs());
    let mut sum = 0.0;
    for k in 0..SAMPLES {
        let t = (k as f64 + 0.5) / SAMPLES as f64;
        let cell = cell_of((a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)));
        if cell != from && cell != to && scene.is_vehicle(cell.0, cell.1) {
            sum += atten;
        }
    }
    sum * major / SAMPLES as f64
}

#[test]
fn raster_ray_matches_supersampled_line_integral() {
    // Exhaustive on 8x8: every transmitter, every receiver, every single
    // vehicle position.
    let n = 8;
    let cfg = OracleConfig::default();
    let quantum = cfg.dynamic_atten_db_per_cell;
    let mut worst: f64 = 0.0;
    for v in 0..n * n {
        let vehicle = (v / n, v % n);
        for b in 0..n * n {
            let bs = (b / n, b % n);
            let scene = with_masks(n, &[], &[vehicle], bs);
            let free = open_scene(n, bs);
            for r in 0..n {
                for c in 0..n {
                    let raster = raw_loss_db(&scene, &cfg, r, c) - raw_loss_db(&free, &cfg, r, c);
                    let exact = supersampled_vehicle_loss(&scene, bs, (r, c), quantum);
                    worst = worst.max((raster - exact).abs());
                }
            }
        }
    }
    assert!(worst <= quantum + 1e-9, "worst deviation {worst} dB");
}

#[test]
fn ray_cells_are_connected_and_exclusive() {
    for (from, to) in [((0, 0), (7, 3)), ((7, 7), (0, 2)), ((3, 0), (3, 7)), ((6, 1), (1, 5))] {
        let cells = ray_cells(from, to);
        assert!(!cells.contains(&from) && !cells.contains(&to));
        let mut prev = from;
        for &c in cells.iter().chain(std::iter::once(&to)) {
            let step = (c.0 as i64 - prev.0 as i64).abs().max((c.1 as i64 - prev.1 as i64).abs());
            assert_eq!(step, 1, "{from:?}->{to:?}");
            prev = c;
        }
    }
}

proptest! {
    #[test]
    fn free_space_is_monotone_along_rays(
        bs_r in 0usize..32, bs_c in 0usize..32, dr in -3i64..=3, dc in -3i64..=3,
    ) {
        prop_assume!(dr != 0 || dc != 0);
        let s = open_scene(32, (bs_r, bs_c));
        let gray = compute_pathloss(&s, &OracleConfig::default()).unwrap().gray;
        let mut prev = f64::INFINITY;
        let mut k = 0i64;
        loop {
            let (r, c) = (bs_r as i64 + k * dr, bs_c as i64 + k * dc);
            if !(0..32).contains(&r) || !(0..32).contains(&c) {
                break;
            }
            let g = gray[[r as usize, c as usize]];
            prop_assert!(g <= prev);
            prev = g;
            k += 1;
        }
    }

    #[test]
    fn pathloss_is_deterministic(seed in 0u64..200) {
        let s = generate_scene(seed, 32, 6, 4).unwrap();
        let cfg = OracleConfig::default();
        let a = compute_pathloss(&s, &cfg).unwrap();
        let b = compute_pathloss(&s, &cfg).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn dynamic_never_darker_than_static(seed in 0u64..200) {
        // Reclassify every vehicle cell as a building and compare.
        let s = generate_scene(seed, 32, 4, 6).unwrap();
        let as_static = &s.static_mask().clone() + s.dynamic_mask();
        let stat = EnvironmentScene::from_parts_unchecked(as_static, Array2::zeros((32, 32)), *s.bs());
        let cfg = OracleConfig::default();
        let g_dyn = compute_pathloss(&s, &cfg).unwrap().gray;
        let g_stat = compute_pathloss(&stat, &cfg).unwrap().gray;
        for ((r, c), &g) in g_dyn.indexed_iter() {
            if s.dynamic_mask()[[r, c]] == 0 {
                prop_assert!(g >= g_stat[[r, c]]);
            }
        }
    }
}

#[test]
fn encoder_matches_oracle_gray() {
    let s = generate_scene(5, 32, 6, 4).unwrap();
    let cfg = OracleConfig::default();
    let rm = compute_pathloss(&s, &cfg).unwrap();
    let enc: EncodeConfig = cfg.encode_config();
    assert_eq!(encode_gray(&rm.pathloss_db, &enc).unwrap(), rm.gray);
}
