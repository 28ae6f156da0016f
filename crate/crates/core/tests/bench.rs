use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};
use proptest::prelude::*;
use udocker_core::bench::{
    mask_outliers, ratio, ratio_of, run_matrix, summarize, Manifest, Measurement, RowStatus, RunSample, StatsError,
};

fn exact(x: f64) -> BigRational {
    BigRational::from_float(x).unwrap()
}

/// sqrt of a non-negative rational to about 60 significant digits.
fn sqrt(q: &BigRational) -> BigRational {
    let scale = BigInt::from(10).pow(60);
    let n = q.numer() * q.denom() * &scale * &scale;
    BigRational::new(n.sqrt(), q.denom() * scale)
}

/// R and ΔR evaluated in exact rational arithmetic, straight from the
/// textbook formula.
fn oracle(t_i: f64, dt_i: f64, t_host: f64, dt_host: f64) -> (BigRational, BigRational) {
    let (t_i, dt_i, t_host, dt_host) = (exact(t_i), exact(dt_i), exact(t_host), exact(dt_host));
    let r = &t_i / &t_host;
    let a = &dt_i / &t_i;
    let b = &dt_host / &t_host;
    let dr = &r * sqrt(&(&a * &a + &b * &b));
    (r, dr)
}

fn rel_err(got: f64, want: &BigRational) -> f64 {
    let diff = (exact(got) - want).abs();
    if want.is_zero() {
        return diff.to_f64().unwrap();
    }
    (diff / want.abs()).to_f64().unwrap()
}

#[test]
fn worked_example() {
    let r = ratio_of(100.0, 2.0, 50.0, 1.0).unwrap();
    assert_eq!(r.r, 2.0);
    assert!((r.dr - 0.056569).abs() < 5e-7, "{}", r.dr);
    let (_, dr) = oracle(100.0, 2.0, 50.0, 1.0);
    assert!(rel_err(r.dr, &dr) <= 1e-12);
}

#[test]
fn zero_errors_propagate_to_zero() {
    let r = ratio_of(3.0, 0.0, 1.5, 0.0).unwrap();
    assert_eq!((r.r, r.dr), (2.0, 0.0));
}

#[test]
fn self_ratio() {
    let s = RunSample::new("native", vec![1.0, 1.1, 0.9, 1.05, 0.95, 1.02]).unwrap();
    let r = ratio(&s, &s).unwrap();
    let sum = s.summary();
    assert_eq!(r.r, 1.0);
    let want = 2f64.sqrt() * sum.std / sum.mean;
    assert!((r.dr - want).abs() <= 1e-15 * want, "{} vs {want}", r.dr);
}

#[test]
fn undefined_ratio() {
    assert_eq!(ratio_of(1.0, 0.0, 0.0, 0.0), Err(StatsError::UndefinedRatio));
}

#[test]
fn single_outlier_is_masked() {
    // median 10, MAD 0: anything away from 10 goes.
    assert_eq!(mask_outliers(&[10.0, 10.0, 10.0, 10.0, 100.0]).unwrap(), [true, true, true, true, false]);
    // Hand-checked: median 10.5, deviations .5 .5 .5 .5 89.5 -> MAD .5,
    // limit 3 * 1.4826 * .5 = 2.2239.
    assert_eq!(mask_outliers(&[10.0, 11.0, 10.0, 11.0, 100.0, 10.5]).unwrap(), [true, true, true, true, false, true]);
}

#[test]
fn equal_samples_keep_everything() {
    assert!(mask_outliers(&[2.5; 7]).unwrap().iter().all(|k| *k));
}

#[test]
fn degenerate_samples() {
    assert!(matches!(mask_outliers(&[1.0, 2.0, 10.0]), Err(StatsError::Degenerate { .. })));
    assert!(matches!(mask_outliers(&[1.0, 2.0]), Err(StatsError::Degenerate { .. })));
    assert!(matches!(mask_outliers(&[1.0, f64::NAN, 1.0]), Err(StatsError::BadSample(_))));
}

#[test]
fn sample_and_population_deviation() {
    let s = summarize(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
    assert_eq!(s.mean, 5.0);
    assert_eq!(s.std_pop, 2.0);
    assert!((s.std - (32.0f64 / 7.0).sqrt()).abs() < 1e-15);
    assert!((s.sem - s.std / 8f64.sqrt()).abs() < 1e-15);
}

fn manifest(modes: &[&str], reps: usize) -> Manifest {
    let text = format!(
        "name = \"stat\"\ncontainer = \"c\"\ncommand = [\"/stat_loop\", \"/etc/msg\", \"100000\"]\nmodes = [{}]\nrepetitions = {reps}\n",
        modes.iter().map(|m| format!("\"{m}\"")).collect::<Vec<_>>().join(", ")
    );
    Manifest::parse(&text).unwrap()
}

#[test]
fn manifest_defaults_and_checks() {
    let m = Manifest::parse("name = \"x\"\ncontainer = \"c\"\ncommand = [\"/bin/true\"]\nmodes = [\"native\", \"P1\"]\n").unwrap();
    assert_eq!(m.repetitions, 10);
    assert_eq!(m.baseline, "native");
    assert!(Manifest::parse("name = \"x\"\ncontainer = \"c\"\ncommand = []\nmodes = [\"native\"]\n").is_err());
    assert!(Manifest::parse("name = \"x\"\ncontainer = \"c\"\ncommand = [\"a\"]\nmodes = [\"P1\"]\n").is_err());
    assert!(Manifest::parse("name = \"x\"\ncontainer = \"c\"\ncommand = [\"a\"]\nmodes = [\"native\"]\nbogus = 1\n").is_err());
}

/// Deterministic fake timings: a slow first run, as with a cold cache.
fn fake_runner() -> impl FnMut(&str) -> Result<Measurement, String> {
    let mut count = std::collections::HashMap::<String, usize>::new();
    move |mode: &str| {
        let n = count.entry(mode.to_string()).or_default();
        *n += 1;
        let base = match mode {
            "native" => 1.0,
            "P1" => 1.2,
            "P2" => 1.5,
            _ => return Ok(Measurement { seconds: 1.0, exit_code: 3, stops: None }),
        };
        let warm = if *n == 1 { 3.0 } else { 1.0 + 0.01 * (*n % 3) as f64 };
        Ok(Measurement {
            seconds: base * warm,
            exit_code: 0,
            stops: (mode != "native").then_some(if mode == "P1" { 100 } else { 1000 }),
        })
    }
}

#[test]
fn matrix_report_csv_and_chart_agree() {
    let m = manifest(&["native", "P1", "P2", "F9"], 10);
    let report = run_matrix(&m, &mut fake_runner()).unwrap();
    assert_eq!(report.rows.len(), 4);
    let native = report.row("native").unwrap();
    assert_eq!(native.ratio.unwrap().r, 1.0);
    // The cold first run is part of the sample and then masked.
    assert_eq!(native.sample.len(), 10);
    assert!(!native.mask[0]);
    assert!(matches!(report.row("F9").unwrap().status, RowStatus::Failed(_)));
    assert_eq!(report.row("P1").unwrap().stops, Some(100));

    let mut csv_bytes = Vec::new();
    report.write_csv(&mut csv_bytes).unwrap();
    let mut rd = csv::Reader::from_reader(csv_bytes.as_slice());
    let headers = rd.headers().unwrap().clone();
    assert_eq!(headers.iter().collect::<Vec<_>>(), udocker_core::bench::CSV_COLUMNS);
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);

    let svg = report.svg();
    let mut bars = std::collections::BTreeMap::new();
    for part in svg.split("<rect class=\"bar\"").skip(1) {
        let attr = |name: &str| {
            let start = part.find(&format!("{name}=\"")).unwrap() + name.len() + 2;
            part[start..start + part[start..].find('"').unwrap()].to_string()
        };
        bars.insert(attr("data-mode"), attr("data-ratio").parse::<f64>().unwrap());
    }
    assert_eq!(bars.len(), 3, "failed rows are not drawn");
    for row in &rows {
        let mode = &row[0];
        let status = &row[10];
        if status == "ok" {
            let r: f64 = row[7].parse().unwrap();
            assert_eq!(bars[mode], r, "{mode}");
        } else {
            assert!(!bars.contains_key(mode));
            assert!(row[7].is_empty());
        }
    }
    assert_eq!(bars["native"], 1.0);
}

#[test]
fn failed_baseline_is_an_error() {
    let m = manifest(&["native", "P1"], 5);
    let mut runner = |mode: &str| {
        Ok(Measurement {
            seconds: 1.0,
            exit_code: i32::from(mode == "native"),
            stops: None,
        })
    };
    assert!(run_matrix(&m, &mut runner).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn ratio_matches_exact_oracle(
        t_i in 1e-6f64..1e6,
        fi in 0.0f64..1.0,
        t_host in 1e-6f64..1e6,
        fh in 0.0f64..1.0,
    ) {
        let (dt_i, dt_host) = (t_i * fi, t_host * fh);
        let got = ratio_of(t_i, dt_i, t_host, dt_host).unwrap();
        let (r, dr) = oracle(t_i, dt_i, t_host, dt_host);
        prop_assert!(rel_err(got.r, &r) <= 1e-12);
        prop_assert!(rel_err(got.dr, &dr) <= 1e-12, "dr {} vs {:?}", got.dr, dr.to_f64());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn masking_is_order_independent_and_idempotent(
        mut xs in prop::collection::vec(0.5f64..2.0, 5..25),
        outliers in prop::collection::vec(10.0f64..100.0, 0..3),
        seed in any::<u64>(),
    ) {
        xs.extend(outliers);
        let Ok(mask) = mask_outliers(&xs) else { return Ok(()) };
        let kept = |xs: &[f64], mask: &[bool]| {
            let mut v: Vec<f64> = xs.iter().zip(mask).filter(|(_, k)| **k).map(|(x, _)| *x).collect();
            v.sort_by(f64::total_cmp);
            v
        };
        let survivors = kept(&xs, &mask);

        let mut shuffled = xs.clone();
        let mut s = seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let m2 = mask_outliers(&shuffled).unwrap();
        prop_assert_eq!(kept(&shuffled, &m2), survivors.clone());

        let again = mask_outliers(&survivors).unwrap();
        prop_assert!(again.iter().all(|k| *k));
    }
}
