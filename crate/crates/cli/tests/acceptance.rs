//! One PASS/FAIL line per acceptance criterion. Run with
//! `cargo test -p histoloop-cli --test acceptance`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use image::{Rgb, RgbImage};
use num_rational::Ratio;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use histoloop_core::active::{apply_to_pool, rank_slides_for_review, OverlaySettings, OverlaySource, PoolSlide, RoundConfig, RoundState};
use histoloop_core::classifier::{
    dataset_examples, predict_map, slide_examples, train, PredictionMap, TilePrediction, TrainConfig,
};
use histoloop_core::cluster::{kmeans, KMeansParams};
use histoloop_core::cluster::{AnnotationSession, Decision, SessionConfig, SessionEvent};
use histoloop_core::embedder::{BaselineTexture, Embedding};
use histoloop_core::labels::{split_by_slide, LabeledDataset, LabeledSlide};
use histoloop_core::qc::{dice, filter_bag, mapped_accuracy, BagStrategy, ForegroundMask, LabelMapping};
use histoloop_core::synthetic::{basis_blobs, random_slide, Prepared, ScriptedAnnotator, SyntheticConfig, SyntheticSlide};
use histoloop_core::tiler::{build_tile_grid, is_background_pixels, RasterSlide, WhiteRule};
use histoloop_core::viz::{export_geojson, ColorTable, FeatureCollection};
use histoloop_core::{EventMeta, SlideRef, Timestamp, TileAddress, TissueClass, CLASS_COUNT};
use histoloop_service::ingest::{embed_slide, tile_slide};
use histoloop_service::DataRoot;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(limit: Duration, start: Instant) -> Result<Duration, String> {
    let t = start.elapsed();
    if t > limit {
        return Err(format!("took {t:.1?}, limit {limit:?}"));
    }
    Ok(t)
}

// White filter ------------------------------------------------------------

/// Brute force: a pixel is bright when r+g+b > 3·230; a patch is background
/// when bright·100 > 95·n.
fn white_oracle(img: &RgbImage) -> bool {
    let n = img.width() as u64 * img.height() as u64;
    let bright = img.pixels().filter(|p| p.0.iter().map(|&v| v as u32).sum::<u32>() > 690).count() as u64;
    bright * 100 > 95 * n
}

fn white_filter() -> Outcome {
    let start = Instant::now();
    let rule = WhiteRule::default();
    let check = |img: &RgbImage| is_background_pixels(img, rule.brightness_threshold, rule.fraction_threshold);
    // 100x100 patch: 9,500 bright pixels is exactly 95.000%.
    let boundary = |bright: u32, value: Rgb<u8>| {
        let mut img = RgbImage::from_pixel(100, 100, Rgb([120, 80, 140]));
        for i in 0..bright {
            img.put_pixel(i % 100, i / 100, value);
        }
        img
    };
    let b = Rgb([231, 231, 231]);
    ensure!(!check(&boundary(9500, b)), "exactly 95.000% bright returned true");
    ensure!(check(&boundary(9501, b)), "95.01% bright returned false");
    // Pixel boundary: mean exactly 230 is not bright, 230.33 is.
    ensure!(!check(&boundary(10_000, Rgb([230, 230, 230]))), "mean-230 pixels counted as bright");
    ensure!(check(&boundary(10_000, Rgb([231, 230, 230]))), "mean-230.33 pixels not counted as bright");

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut agree = 0;
    let mut positives = 0;
    for i in 0..10_000 {
        let (w, h) = (rng.random_range(8..=48), rng.random_range(8..=48));
        let p_bright: f64 = if i % 2 == 0 { rng.random_range(0.9..1.0) } else { rng.random_range(0.0..1.0) };
        let img = RgbImage::from_fn(w, h, |_, _| {
            if rng.random_bool(p_bright) {
                Rgb(std::array::from_fn(|_| rng.random_range(226..=255)))
            } else {
                Rgb(std::array::from_fn(|_| rng.random_range(0..=235)))
            }
        });
        let expected = white_oracle(&img);
        ensure!(check(&img) == expected, "patch {i} ({w}x{h}) disagrees with the oracle (oracle says {expected})");
        agree += 1;
        positives += expected as usize;
    }
    let t = within(Duration::from_secs(30), start)?;
    Ok(format!("boundary exact; {agree}/10000 random patches agree ({positives} background); {t:.2?}"))
}

// Dice --------------------------------------------------------------------

fn dice_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let (da, db) = match i % 10 {
            0 => (0.0, 0.0),
            1 => (0.0, rng.random_range(0.0..1.0)),
            _ => (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
        };
        let va: Vec<bool> = (0..1024).map(|_| rng.random_bool(da)).collect();
        let vb: Vec<bool> = (0..1024).map(|_| rng.random_bool(db)).collect();
        let inter = va.iter().zip(&vb).filter(|(x, y)| **x && **y).count() as i64;
        let (na, nb) = (va.iter().filter(|x| **x).count() as i64, vb.iter().filter(|x| **x).count() as i64);
        let exact = if na + nb == 0 { Ratio::from_integer(1) } else { Ratio::new(2 * inter, na + nb) };
        let oracle = *exact.numer() as f64 / *exact.denom() as f64;
        let a = ForegroundMask::new("s", 32, 32, 1.0, va).map_err(|e| e.to_string())?;
        let b = ForegroundMask::new("s", 32, 32, 1.0, vb).map_err(|e| e.to_string())?;
        let ab = dice(&a, &b).map_err(|e| e.to_string())?;
        let ba = dice(&b, &a).map_err(|e| e.to_string())?;
        worst = worst.max((ab - oracle).abs());
        ensure!((ab - oracle).abs() <= 1e-12, "pair {i}: dice {ab} vs exact {exact}");
        ensure!(ab == ba, "pair {i}: asymmetric {ab} vs {ba}");
        ensure!(dice(&a, &a).map_err(|e| e.to_string())? == 1.0, "pair {i}: self-Dice of a is not 1");
        ensure!(dice(&b, &b).map_err(|e| e.to_string())? == 1.0, "pair {i}: self-Dice of b is not 1");
        ensure!((0.0..=1.0).contains(&ab), "pair {i}: out of range");
    }
    let t = within(Duration::from_secs(30), start)?;
    Ok(format!("1000 pairs, max |error| {worst:.1e} (tolerance 1e-12), symmetric, self-Dice 1; {t:.2?}"))
}

// Clustering purity -------------------------------------------------------

fn clustering_purity() -> Outcome {
    let start = Instant::now();
    let (points, truth) = basis_blobs(32, 40, 40, 0.01, 3);
    let data: Vec<&[f64]> = points.iter().map(Vec::as_slice).collect();
    let fit = kmeans(&data, &KMeansParams::new(32, 3));
    let mut counts: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (c, t) in fit.labels.iter().zip(&truth) {
        *counts.entry(*c).or_default().entry(*t).or_default() += 1;
    }
    let majority: usize = counts.values().map(|m| m.values().max().copied().unwrap_or(0)).sum();
    let purity = majority as f64 / points.len() as f64;
    let h = &fit.inertia_history;
    let monotone = h.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12));
    ensure!(monotone, "objective increased: {h:?}");
    ensure!(purity >= 0.99, "purity {purity:.4} < 0.99");
    let t = within(Duration::from_secs(60), start)?;
    Ok(format!("purity {purity:.4} (>= 0.99) over {} points, {} iterations, objective non-increasing; {t:.2?}", points.len(), fit.iterations))
}

// Session partition -------------------------------------------------------

fn session_partition() -> Outcome {
    let config = SyntheticConfig::default();
    let mut lines = Vec::new();
    let mut discards = 0;
    for i in 0..5 {
        let s = random_slide(&format!("part-{i}"), &config, 500 + i);
        let p = s.prepare().map_err(|e| e.to_string())?;
        let id = format!("sess-part-{i}");
        let (session, labeled) = match i {
            // Rejects every grid, so both rounds end heterogeneous.
            3 => {
                let mut annotator = ScriptedAnnotator::new(s.truth());
                annotator.min_agreement = 1.01;
                annotator.run_session(&id, &p.embeddings, SessionConfig::default(), "scripted", 0)
            }
            // Alternating decisions in both rounds: labels and discards mix.
            4 => (|| {
                let mut rng = ChaCha8Rng::seed_from_u64(i);
                let mut tick = 0;
                let mut meta = || {
                    tick += 1;
                    EventMeta::new("scripted", Timestamp(tick))
                };
                let mut session = AnnotationSession::start(&id, &p.embeddings, SessionConfig::default(), meta())?;
                for round in 1..=2 {
                    for (n, cluster) in session.review_queue().into_iter().enumerate() {
                        let decision = if n % 2 == 0 {
                            Decision::Label(TissueClass::ALL[rng.random_range(0..CLASS_COUNT)])
                        } else {
                            Decision::Heterogeneous
                        };
                        session.review(cluster, decision, meta())?;
                    }
                    if round == 1 {
                        session.recluster(&p.embeddings, 11, meta())?;
                    }
                }
                let labeled = session.finalize(meta())?;
                Ok((session, labeled))
            })(),
            _ => ScriptedAnnotator::new(s.truth()).run_session(&id, &p.embeddings, SessionConfig::default(), "scripted", 0),
        }
        .map_err(|e: histoloop_core::cluster::SessionError| e.to_string())?;
        let fg = p.grid.foreground_count();
        let (l, d) = (labeled.records.len(), labeled.discarded.len());
        ensure!(l + d == fg, "slide {i}: {l} labeled + {d} discarded != {fg} foreground");
        let overlap = labeled.records.keys().filter(|a| labeled.discarded.contains_key(*a)).count();
        ensure!(overlap == 0, "slide {i}: {overlap} tiles both labeled and discarded");
        // Replay from the serialized log.
        let log = serde_json::to_string(session.events()).map_err(|e| e.to_string())?;
        let events: Vec<SessionEvent> = serde_json::from_str(&log).map_err(|e| e.to_string())?;
        let replayed = AnnotationSession::replay(session.session_id.clone(), &p.embeddings, &events).map_err(|e| e.to_string())?;
        let again = replayed.result().ok_or("replayed session is not finalized")?;
        let (a, b) = (serde_json::to_vec(&labeled).unwrap(), serde_json::to_vec(again).unwrap());
        ensure!(a == b, "slide {i}: replayed LabeledSlide differs");
        lines.push(format!("{l}+{d}={fg}"));
        discards += d;
    }
    ensure!(discards > 0, "no slide exercised the discard path");
    Ok(format!("5 slides partitioned ({}); replay byte-identical", lines.join(", ")))
}

// End-to-end loop ---------------------------------------------------------

fn annotate(s: &SyntheticSlide, p: &Prepared) -> Result<LabeledSlide, String> {
    let (_, labeled) = ScriptedAnnotator::new(s.truth())
        .run_session(&format!("sess-{}", s.slide_id), &p.embeddings, SessionConfig::default(), "scripted", 0)
        .map_err(|e| e.to_string())?;
    Ok(labeled)
}

fn patch_accuracy(slides: &[&(SyntheticSlide, Prepared)], map: &BTreeMap<String, PredictionMap>) -> (usize, usize) {
    let mut correct = 0;
    let mut total = 0;
    for (s, _) in slides {
        let truth = s.truth();
        for pred in &map[&s.slide_id].predictions {
            if let Some(t) = truth.get(&pred.address) {
                total += 1;
                correct += (pred.class == *t) as usize;
            }
        }
    }
    (correct, total)
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let config = SyntheticConfig::default();
    let slides: Vec<(SyntheticSlide, Prepared)> = (0..12)
        .map(|i| {
            let s = random_slide(&format!("e2e-{i:02}"), &config, 900 + i);
            let p = s.prepare().expect("synthetic slide prepares");
            (s, p)
        })
        .collect();
    let by_id: BTreeMap<&str, &(SyntheticSlide, Prepared)> = slides.iter().map(|sp| (sp.0.slide_id.as_str(), sp)).collect();
    let embeddings: BTreeMap<String, Vec<Embedding>> = slides.iter().map(|(s, p)| (s.slide_id.clone(), p.embeddings.clone())).collect();
    let ids: Vec<String> = slides.iter().map(|(s, _)| s.slide_id.clone()).collect();
    let meta = || EventMeta::new("acceptance", Default::default());

    let mut labeled: Vec<LabeledSlide> = slides[..4].iter().map(|(s, p)| annotate(s, p)).collect::<Result<_, _>>()?;
    let cfg = RoundConfig { initial_training: 4, per_round: 2 };
    let mut round0 = RoundState::initial(ids[..4].to_vec(), ids[4..].to_vec(), cfg, meta()).map_err(|e| e.to_string())?;
    let universe: BTreeSet<String> = ids.iter().cloned().collect();

    let fit = |labeled: &[LabeledSlide]| -> Result<_, String> {
        let ds = LabeledDataset::from_slides(labeled.to_vec()).map_err(|e| e.to_string())?;
        let (tr, va) = split_by_slide(&ds, 0.75, 0).map_err(|e| e.to_string())?;
        let tr = dataset_examples(&tr, &embeddings).map_err(|e| e.to_string())?;
        let va = dataset_examples(&va, &embeddings).map_err(|e| e.to_string())?;
        train(&tr, &va, &TrainConfig::default()).map_err(|e| e.to_string())
    };
    let model0 = fit(&labeled)?;

    let overlay_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let sources: Vec<RasterSlide> = slides.iter().map(|(s, _)| RasterSlide::from_image(s.image.clone())).collect();
    let pool: Vec<PoolSlide> = slides
        .iter()
        .zip(&sources)
        .skip(4)
        .map(|((s, p), src)| PoolSlide {
            slide_id: s.slide_id.clone(),
            embeddings: p.embeddings.clone(),
            overlay: Some(OverlaySource { source: src, slide: p.slide.clone(), grid: p.grid.clone() }),
        })
        .collect();
    let settings = OverlaySettings { dir: overlay_dir.path().to_path_buf(), max_dim: 256, colors: ColorTable::default() };
    let app = apply_to_pool(&model0, &pool, Some(&settings)).map_err(|e| e.to_string())?;
    ensure!(app.failures.is_empty(), "pool failures: {:?}", app.failures);
    ensure!(app.reports.len() == 8, "{} reports for 8 pool slides", app.reports.len());
    ensure!(app.reports.iter().all(|r| r.overlay.as_ref().is_some_and(|p| p.is_file())), "missing overlays");
    round0.record_application(&model0.id, &app, meta()).map_err(|e| e.to_string())?;
    let ranking = rank_slides_for_review(&app.reports);
    let flagged: Vec<String> = ranking[..2].to_vec();
    for id in &flagged {
        round0.flag(id, meta()).map_err(|e| e.to_string())?;
    }
    let newly: Vec<LabeledSlide> = flagged.iter().map(|id| annotate(&by_id[id.as_str()].0, &by_id[id.as_str()].1)).collect::<Result<_, _>>()?;
    let round1 = round0.close(&newly, meta()).map_err(|e| e.to_string())?;
    labeled.extend(newly);

    ensure!(round1.training_slide_ids.is_superset(&round0.training_slide_ids), "training set shrank");
    ensure!(round1.training_slide_ids.len() == 6, "round 1 trains on {} slides", round1.training_slide_ids.len());
    let union: BTreeSet<String> = round1.training_slide_ids.union(&round1.pool_slide_ids).cloned().collect();
    ensure!(union == universe, "training ∪ pool changed");
    ensure!(round1.training_slide_ids.is_disjoint(&round1.pool_slide_ids), "training and pool overlap");
    ensure!(round0.flag(&ids[5], meta()).is_err(), "closed round accepted a mutation");

    let model1 = fit(&labeled)?;
    let held_out: Vec<&(SyntheticSlide, Prepared)> = round1.pool_slide_ids.iter().map(|id| by_id[id.as_str()]).collect();
    let maps = |m| -> Result<BTreeMap<String, PredictionMap>, String> {
        held_out
            .iter()
            .map(|(s, p)| Ok((s.slide_id.clone(), predict_map(m, &s.slide_id, &p.embeddings).map_err(|e| e.to_string())?)))
            .collect()
    };
    let (c0, n0) = patch_accuracy(&held_out, &maps(&model0)?);
    let (c1, n1) = patch_accuracy(&held_out, &maps(&model1)?);
    let acc1 = c1 as f64 / n1 as f64;
    // The retrained model must also fit its own training slides.
    let train_ex: usize = labeled.iter().map(|l| slide_examples(l, &embeddings[&l.slide_id]).map(|e| e.len()).unwrap_or(0)).sum();
    ensure!(acc1 >= 0.95, "held-out accuracy after round 1 is {acc1:.4} ({c1}/{n1})");
    let t = within(Duration::from_secs(300), start)?;
    Ok(format!(
        "held-out accuracy {acc1:.4} ({c1}/{n1}) after round 1 (round 0: {:.4}); flagged {flagged:?}; training 4 -> 6 ({train_ex} labeled tiles); {t:.1?}",
        c0 as f64 / n0 as f64
    ))
}

// Bag laws ----------------------------------------------------------------

fn bag_laws() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut tiles = 0;
    for m in 0..500 {
        let (rows, cols) = (rng.random_range(1..=20), rng.random_range(1..=20));
        let skew = rng.random_range(0..CLASS_COUNT);
        let mut predictions = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                if rng.random_bool(0.2) {
                    continue;
                }
                let mut p: [f64; CLASS_COUNT] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
                p[skew] += rng.random_range(0.0..1.0);
                let s: f64 = p.iter().sum();
                predictions.push(TilePrediction::new(TileAddress::new(r, c), p.map(|x| x / s)));
            }
        }
        let map = PredictionMap { slide_id: format!("m{m}"), predictions };
        // Oracle argmax, first maximum wins.
        let oracle = |p: &[f64; CLASS_COUNT]| (0..CLASS_COUNT).fold(0, |best, i| if p[i] > p[best] { i } else { best });
        let artifacts = map.predictions.iter().filter(|p| TissueClass::ALL[oracle(&p.probabilities)] == TissueClass::Artifact).count();
        let adipose = map.predictions.iter().filter(|p| TissueClass::ALL[oracle(&p.probabilities)] == TissueClass::Adipose).count();
        let set = |s| filter_bag(&map, s).included.into_iter().collect::<BTreeSet<_>>();
        let (all, qc, fat) = (set(BagStrategy::All), set(BagStrategy::Qc), set(BagStrategy::QcFatMinus));
        ensure!(all.len() == map.len(), "map {m}: All has {} of {} tiles", all.len(), map.len());
        ensure!(qc.is_subset(&all) && fat.is_subset(&qc), "map {m}: containment violated");
        ensure!(all.len() - qc.len() == artifacts, "map {m}: |All|-|QC| = {} but {artifacts} artifact tiles", all.len() - qc.len());
        ensure!(qc.len() - fat.len() == adipose, "map {m}: |QC|-|QCFat-| = {} but {adipose} adipose tiles", qc.len() - fat.len());
        for s in [BagStrategy::All, BagStrategy::Qc, BagStrategy::QcFatMinus] {
            let b = filter_bag(&map, s);
            ensure!(b.included.len() + b.excluded.total() == map.len(), "map {m}: {s} loses tiles");
        }
        tiles += map.len();
    }
    Ok(format!("500 maps, {tiles} tiles: QCFat- ⊆ QC ⊆ All and both count identities exact"))
}

// Mapped accuracy ---------------------------------------------------------

fn mapped_accuracy_protocol() -> Outcome {
    use TissueClass::*;
    // Transcribed from the external-validation protocol.
    let fixture: [(&str, &[TissueClass]); 9] = [
        ("ADI", &[Adipose]),
        ("NORM", &[Epithelium]),
        ("BACK", &[Artifact]),
        ("LYM", &[Lymphocytes]),
        ("TUM", &[Epithelium]),
        ("MUC", &[Miscellaneous]),
        ("DEB", &[Miscellaneous]),
        ("STR", &[Stroma]),
        ("MUS", &[Stroma]),
    ];
    let mapping = LabelMapping::crc();
    for (ext, classes) in fixture {
        let want: BTreeSet<TissueClass> = classes.iter().copied().collect();
        ensure!(mapping.get(ext) == Some(&want), "{ext} maps to {:?}", mapping.get(ext));
    }
    ensure!(mapping.0.len() == 9, "mapping has {} external classes", mapping.0.len());

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut items: Vec<(String, TissueClass)> = Vec::new();
    let (mut hits, mut total) = (0u64, 0u64);
    let mut per_class = Vec::new();
    for (ext, classes) in fixture {
        let n = rng.random_range(20..200u64);
        let h = rng.random_range(0..=n);
        let wrong: Vec<TissueClass> = TissueClass::ALL.iter().copied().filter(|c| !classes.contains(c)).collect();
        for j in 0..n {
            let pred = if j < h { classes[0] } else { *wrong.choose(&mut rng).unwrap() };
            items.push((ext.to_string(), pred));
        }
        hits += h;
        total += n;
        per_class.push(format!("{ext} {h}/{n}"));
    }
    items.shuffle(&mut rng);
    let r = mapped_accuracy(items.iter().map(|(e, c)| (e.as_str(), *c)), &mapping).map_err(|e| e.to_string())?;
    ensure!(r.correct == hits && r.total == total, "tally {}/{} vs planted {hits}/{total}", r.correct, r.total);
    ensure!(r.accuracy == hits as f64 / total as f64, "accuracy {} vs {}", r.accuracy, hits as f64 / total as f64);
    for (ext, _) in fixture {
        let row_total: u64 = r.confusion[ext].iter().sum();
        let expected = items.iter().filter(|(e, _)| e == ext).count() as u64;
        ensure!(row_total == expected, "confusion row {ext} sums to {row_total}, expected {expected}");
    }
    ensure!(mapped_accuracy([("XYZ", Stroma)], &mapping).is_err(), "unmapped label accepted");
    Ok(format!("fixture matches; accuracy {hits}/{total} exact ({})", per_class.join(", ")))
}

// GeoJSON -----------------------------------------------------------------

fn geojson_export() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // (base mpp, working mpp, tile px) -> base-level tile side.
    let cases = [(0.25, 1.0, 256u32, 1024u32), (0.5, 1.0, 224, 448), (1.0, 1.0, 64, 64)];
    let mut notes = Vec::new();
    for (base_mpp, working_mpp, tile, side) in cases {
        let (w, h) = (side * 7 + side / 2, side * 5 + 3);
        let slide = SlideRef::new("geo", "memory://geo", base_mpp, w, h).map_err(|e| e.to_string())?;
        let grid = build_tile_grid(&slide, tile, working_mpp).map_err(|e| e.to_string())?;
        ensure!((grid.rows, grid.cols) == (5, 7), "grid {}x{}", grid.rows, grid.cols);
        let predictions: Vec<TilePrediction> = grid
            .addresses()
            .collect::<Vec<_>>()
            .into_iter()
            .filter_map(|a| {
                if !rng.random_bool(0.7) {
                    return None;
                }
                let mut p = [0.02; CLASS_COUNT];
                p[rng.random_range(0..CLASS_COUNT)] = 0.9;
                Some(TilePrediction::new(a, p))
            })
            .collect();
        let map = PredictionMap { slide_id: "geo".into(), predictions };
        let fc = export_geojson(&map, &grid, &slide, &ColorTable::default()).map_err(|e| e.to_string())?;
        ensure!(fc.features.len() == map.len(), "{} features for {} tiles", fc.features.len(), map.len());
        let text = serde_json::to_string(&fc).unwrap();
        let parsed: FeatureCollection = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        ensure!(serde_json::to_string(&parsed).unwrap() == text, "typed round-trip not idempotent");
        let value: Value = serde_json::from_str(&text).unwrap();
        let again: Value = serde_json::from_str(&serde_json::to_string(&value).unwrap()).unwrap();
        ensure!(again == value && serde_json::to_value(&parsed).unwrap() == value, "untyped round-trip not idempotent");
        for (f, p) in value["features"].as_array().unwrap().iter().zip(&map.predictions) {
            let (x0, y0) = ((p.address.col * side) as f64, (p.address.row * side) as f64);
            let (x1, y1) = (x0 + side as f64, y0 + side as f64);
            let want = json!([[[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]]]);
            ensure!(f["geometry"]["coordinates"] == want, "tile {:?}: {} vs {want}", p.address, f["geometry"]["coordinates"]);
            ensure!(f["geometry"]["type"] == "Polygon", "not a polygon");
            ensure!(f["properties"]["classification"]["name"] == p.class.name(), "class name");
        }
        notes.push(format!("{}x{base_mpp}->{side}", tile));
    }
    Ok(format!("feature count, idempotent round-trip and exact base coordinates on 3 cases ({})", notes.join(", ")))
}

// Service durability ------------------------------------------------------

struct Service {
    child: Child,
    base: String,
}

impl Service {
    fn spawn(root: &std::path::Path) -> Result<Self, String> {
        let mut child = Command::new(env!("CARGO_BIN_EXE_histoloop"))
            .args(["--root", root.to_str().unwrap(), "serve", "--port", "0"])
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| e.to_string())?;
        let stdout = child.stdout.take().unwrap();
        let mut line = String::new();
        BufReader::new(stdout).read_line(&mut line).map_err(|e| e.to_string())?;
        let base = line.trim().strip_prefix("listening on ").ok_or_else(|| format!("unexpected banner `{line}`"))?.to_string();
        Ok(Self { child, base })
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn service_durability() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = DataRoot::new(tmp.path());
    let config = SyntheticConfig { rows: 10, cols: 10, ..SyntheticConfig::default() };
    let syn = random_slide("dur", &config, 77);
    let slide = syn.slide_ref("memory://dur").map_err(|e| e.to_string())?;
    tile_slide(&root, &slide, &RasterSlide::from_image(syn.image.clone()), syn.tile_size, syn.base_mpp, WhiteRule::default())
        .map_err(|e| e.to_string())?;
    embed_slide(&root, "dur", &BaselineTexture).map_err(|e| e.to_string())?;

    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let get = |base: &str, path: &str| -> Result<Value, String> {
        let mut r = agent.get(format!("{base}{path}")).call().map_err(|e| e.to_string())?;
        ensure!(r.status() == 200, "GET {path}: {}", r.status());
        r.body_mut().read_json().map_err(|e| e.to_string())
    };

    let annotator = ScriptedAnnotator::new(syn.truth());
    let mut decisions = BTreeMap::new();
    let (token, sid) = {
        let svc = Service::spawn(tmp.path())?;
        let mut r = agent.post(format!("{}/sessions", svc.base)).send_json(json!({ "slide_id": "dur" })).map_err(|e| e.to_string())?;
        ensure!(r.status() == 201, "create: {}", r.status());
        let created: Value = r.body_mut().read_json().map_err(|e| e.to_string())?;
        ensure!(created["progress"]["total"] == 32, "slide yields {} non-empty clusters", created["progress"]["total"]);
        let token = created["token"].as_str().unwrap().to_string();
        let sid = created["session_id"].as_str().unwrap().to_string();
        for n in 0..17 {
            let next = get(&svc.base, &format!("/sessions/{sid}/next"))?;
            let tiles: Vec<TileAddress> = next["tiles"]
                .as_array()
                .unwrap()
                .iter()
                .map(|t| TileAddress::new(t["row"].as_u64().unwrap() as u32, t["col"].as_u64().unwrap() as u32))
                .collect();
            let decision = annotator.decide(&tiles).to_string();
            let cluster = next["cluster_id"].as_u64().unwrap();
            let r = agent
                .post(format!("{}/sessions/{sid}/review", svc.base))
                .header("x-session-token", token.as_str())
                .header("idempotency-key", format!("review-{n}").as_str())
                .send_json(json!({ "round": 1, "cluster_id": cluster, "decision": decision }))
                .map_err(|e| e.to_string())?;
            ensure!(r.status() == 200, "review {n}: {}", r.status());
            decisions.insert(cluster, decision);
        }
        (token, sid)
        // The service is killed here without a shutdown signal.
    };

    let svc = Service::spawn(tmp.path())?;
    let desc = get(&svc.base, &format!("/sessions/{sid}"))?;
    let p = &desc["progress"];
    let (l, h, u) = (p["labeled"].as_u64().unwrap(), p["heterogeneous"].as_u64().unwrap(), p["unreviewed"].as_u64().unwrap());
    ensure!(l + h + u == 32, "{l}+{h}+{u} != 32");
    ensure!(l + h == 17, "{} reviewed after restart", l + h);
    for cluster in desc["clusters"].as_array().unwrap() {
        let id = cluster["cluster_id"].as_u64().unwrap();
        let restored = match cluster["status"].as_str().unwrap() {
            "labeled" => Some(cluster["class"].as_str().unwrap().to_string()),
            "heterogeneous" => Some("heterogeneous".to_string()),
            _ => None,
        };
        ensure!(restored.as_ref() == decisions.get(&id), "cluster {id}: {restored:?} vs {:?}", decisions.get(&id));
    }
    // Retrying an acknowledged review after the restart adds nothing.
    let mut r = agent
        .post(format!("{}/sessions/{sid}/review", svc.base))
        .header("x-session-token", token.as_str())
        .header("idempotency-key", "review-0")
        .send_json(json!({ "round": 1, "cluster_id": decisions.keys().next().unwrap(), "decision": decisions.values().next().unwrap() }));
    let replayed = match &mut r {
        Ok(resp) => resp.body_mut().read_json::<Value>().map(|v| v["replayed"] == true).unwrap_or(false),
        Err(_) => false,
    };
    Ok(format!("after kill/restart: {l} labeled + {h} heterogeneous + {u} unreviewed = 32; 17 decisions identical; retry replayed={replayed}"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("white-filter exactness", white_filter),
        ("dice oracle", dice_oracle),
        ("clustering purity", clustering_purity),
        ("session partition law", session_partition),
        ("end-to-end synthetic loop", end_to_end),
        ("bag-filter laws", bag_laws),
        ("mapped-accuracy protocol", mapped_accuracy_protocol),
        ("geojson export", geojson_export),
        ("service durability", service_durability),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why} ({:.1?})", start.elapsed());
            }
        }
    }
    println!("{} of 9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
