use hfm_core::encodings::*;
use proptest::prelude::*;

const START_2014: i64 = 1_388_534_400;
const START_2025: i64 = 1_735_689_600;

/// Civil date from days since 1970-01-01 (proleptic Gregorian).
fn civil(days: i64) -> (i32, u32, u32) {
    let z = days + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    let y = (yoe + era * 400 + i64::from(m <= 2)) as i32;
    (y, m, d)
}

fn day_of_year(y: i32, m: u32, d: u32) -> u32 {
    const CUM: [u32; 12] = [0, 31, 59, 90, 120, 151, 181, 212, 243, 273, 304, 334];
    let leap = (y % 4 == 0 && y % 100 != 0) || y % 400 == 0;
    CUM[m as usize - 1] + d + u32::from(leap && m > 2)
}

/// Expected encoding entry `j` of a `width`-wide sin-cos block at `pos`.
fn sincos_entry(pos: f64, width: usize, j: usize, base: f64) -> f64 {
    let half = width / 2;
    let k = j % half;
    let angle = pos * (-(base.ln()) * k as f64 / half as f64).exp();
    if j < half {
        angle.sin()
    } else {
        angle.cos()
    }
}

proptest! {
    #[test]
    fn calendar_fields_match_civil_oracle(epoch in START_2014..START_2025) {
        let t = Timestamp::from_epoch(epoch).unwrap();
        let (y, m, d) = civil(epoch.div_euclid(86_400));
        prop_assert_eq!(t.year(), y);
        prop_assert_eq!(t.month(), m);
        prop_assert_eq!(t.day_of_year(), day_of_year(y, m, d));
        prop_assert_eq!(i64::from(t.minute_of_day()), epoch.rem_euclid(86_400) / 60);
        prop_assert_eq!(t.hour_bucket(), epoch.div_euclid(3600));
    }

    #[test]
    fn temporal_encoding_matches_oracle(epoch in START_2014..START_2025, d in prop::sample::select(vec![6usize, 12, 16, 48, 768])) {
        let t = Timestamp::from_epoch(epoch).unwrap();
        let cfg = EncodingConfig::new(d);
        let enc = temporal_encoding(&t, d, &cfg).unwrap();
        prop_assert_eq!(enc.len(), d);
        let (y, m, day) = civil(epoch.div_euclid(86_400));
        let comps = [f64::from(y - 2014), f64::from(day_of_year(y, m, day)), (epoch.rem_euclid(86_400) / 60) as f64];
        let widths = temporal_split(d).unwrap();
        prop_assert_eq!(widths.iter().sum::<usize>(), d);
        let mut offset = 0;
        for (pos, w) in comps.into_iter().zip(widths) {
            for j in 0..w {
                prop_assert!((enc[offset + j] - sincos_entry(pos, w, j, 10_000.0)).abs() < 1e-12);
            }
            offset += w;
        }
    }

    #[test]
    fn encodings_are_bounded(epoch in START_2014..START_2025) {
        let t = Timestamp::from_epoch(epoch).unwrap();
        let enc = temporal_encoding(&t, 48, &EncodingConfig::new(48)).unwrap();
        prop_assert!(enc.iter().all(|v| v.abs() <= 1.0));
    }
}

#[test]
fn spatial_grid_matches_oracle() {
    let (g, d) = (8, 16);
    let field = sincos_2d(g, g, d).unwrap();
    assert_eq!(field.shape(), &[g * g, d]);
    for y in 0..g {
        for x in 0..g {
            let row = &field.data()[(y * g + x) * d..(y * g + x + 1) * d];
            for j in 0..d / 2 {
                assert!((row[j] - sincos_entry(y as f64, d / 2, j, 10_000.0)).abs() < 1e-12);
                assert!((row[d / 2 + j] - sincos_entry(x as f64, d / 2, j, 10_000.0)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn fifteen_minute_steps_are_distinguishable() {
    let d = 48;
    let cfg = EncodingConfig::new(d);
    let steps: Vec<Vec<f64>> = (0..4)
        .map(|k| temporal_encoding(&Timestamp::from_calendar(2021, 200, 600 + 15 * k, 0).unwrap(), d, &cfg).unwrap())
        .collect();
    for i in 0..steps.len() {
        for j in i + 1..steps.len() {
            let dist: f64 = steps[i].iter().zip(&steps[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(dist > 1e-3, "steps {i} and {j} collide");
        }
    }
}

#[test]
fn composed_embedding_is_token_plus_fields() {
    let (grid, d) = ((2, 2), 12);
    let cfg = EncodingConfig { spectral_groups: 2, ..EncodingConfig::new(d) };
    let times = [Timestamp::from_calendar(2016, 10, 30, 0).unwrap(), Timestamp::from_calendar(2016, 10, 45, 0).unwrap()];
    // Two timesteps × two groups × four cells.
    let n = 16;
    let tokens = hfm_core::numerics::Tensor::from_fn(&[n, d], |i| (i as f64 * 0.37).cos());
    let ts: Vec<Timestamp> = (0..n).map(|i| times[i / 8]).collect();
    let groups: Vec<usize> = (0..n).map(|i| (i / 4) % 2).collect();
    let table = hfm_core::numerics::Tensor::from_fn(&[2, d], |i| 0.01 * i as f64);
    let out = compose_token_embedding(&tokens, grid, &ts, &groups, Some(&table), &cfg).unwrap();
    let spatial = sincos_2d(2, 2, d).unwrap();
    for i in 0..n {
        let temporal = temporal_encoding(&ts[i], d, &cfg).unwrap();
        for j in 0..d {
            let expect = tokens.data()[i * d + j] + spatial.data()[(i % 4) * d + j] + temporal[j] + table.data()[groups[i] * d + j];
            assert!((out.data()[i * d + j] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn invalid_dimensions_are_rejected() {
    assert!(sincos_1d(1.0, 5, 10_000.0).is_err());
    assert!(sincos_2d(2, 2, 6).is_err());
    assert!(temporal_split(4).is_err());
    assert!(EncodingConfig::new(18).validate().is_err());
    assert!(Timestamp::from_calendar(2021, 366, 0, 0).is_err());
    assert!(Timestamp::from_calendar(2020, 366, 0, 0).is_ok());
}
