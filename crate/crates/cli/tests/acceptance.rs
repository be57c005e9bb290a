//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails or overruns its time budget.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use vsim::corpus::{Corpus, ImageDoc, LabelVocabulary, RegionRecord};
use vsim::eval::oracle::{coupled_exact_posterior, nnlda_exact_posterior, pam_exact_posterior};
use vsim::eval::oracle::{CoupledExact, ExactPosterior, NnldaExact, PamExact};
use vsim::eval::synth::{generate_synthetic, ModelShape, SizeRange, SyntheticSpec, TruthPriors};
use vsim::eval::{average_precision, symmetric_kl, top_n_accuracy, DEFAULT_KL_FLOOR};
use vsim::joint::{run_da, visual_evidence, DaConfig, DaOutcome};
use vsim::math::{argmax, l1_distance, total_variation};
use vsim::neighborhood::{BagOfLabels, DistanceNorm, FeatureSpaceIndex, SearchStrategy};
use vsim::nnlda::{
    infer_region_topics, label_likelihood, train_nnlda, visual_proposal, NnldaGenerative, NnldaHyperparams,
    NnldaModel, NnldaRegionChain, NnldaTrainer, VisualView,
};
use vsim::pam::{
    estimate_alpha_s, infer_pam_doc, moment_match, sample_generative_pam, semantic_proposal, train_pam,
    train_pam_tokens, MomentMatchConfig, PamCounts, PamDocChain, PamGenerative, PamHyperparams, PamModel,
    PamTrainConfig, PamTrainer, SemanticView,
};
use vsim::rng::{sample_dirichlet, seeded, substream};
use rand::Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- 1

fn direct_semantic(view: &SemanticView<'_>, h: &PamHyperparams, nl: usize) -> Vec<f64> {
    let (ns, nt) = (h.num_super, h.num_sub);
    let doc_len: f64 = view.doc_super.iter().map(|&c| c as f64).sum();
    let mut cells = Vec::with_capacity(ns * nt);
    for s in 0..ns {
        let row_alpha: f64 = (0..nt).map(|t| h.alpha_s[s * nt + t]).sum();
        for t in 0..nt {
            let a = (view.doc_super[s] as f64 + h.alpha0) / (doc_len + ns as f64 * h.alpha0);
            let b = (view.doc_pairs[s * nt + t] as f64 + h.alpha_s[s * nt + t]) / (view.doc_super[s] as f64 + row_alpha);
            let c = (view.label_in_sub[t] as f64 + h.beta) / (view.sub_totals[t] as f64 + nl as f64 * h.beta);
            cells.push(a * b * c);
        }
    }
    let z: f64 = cells.iter().sum();
    cells.iter().map(|x| x / z).collect()
}

fn direct_visual(view: &VisualView<'_>, h: &NnldaHyperparams, nl: usize) -> Vec<f64> {
    let na = h.num_topics;
    let doc_len: f64 = view.doc_topics.iter().map(|&c| c as f64).sum();
    let cells: Vec<f64> = (0..na)
        .map(|a| {
            (view.doc_topics[a] as f64 + h.alpha) / (doc_len + na as f64 * h.alpha)
                * (view.word_in_topic[a] as f64 + h.psi)
                / (view.topic_totals[a] as f64 + nl as f64 * h.psi)
        })
        .collect();
    let z: f64 = cells.iter().sum();
    cells.iter().map(|x| x / z).collect()
}

fn criterion_1() -> Check {
    let mut rng = seeded(101);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (ns, nt, nl) = (rng.random_range(1..6), rng.random_range(1..8), rng.random_range(1..12));
        let mut h = PamHyperparams::new(ns, nt, rng.random_range(0.05..3.0), rng.random_range(0.001..1.0));
        h.alpha_s = (0..ns * nt).map(|_| rng.random_range(0.01..4.0)).collect();
        let doc_pairs: Vec<u32> = (0..ns * nt).map(|_| rng.random_range(0..20)).collect();
        let doc_super: Vec<u32> = doc_pairs.chunks(nt).map(|r| r.iter().sum()).collect();
        let sub_totals: Vec<u32> = (0..nt).map(|_| rng.random_range(0..500)).collect();
        let label_in_sub: Vec<u32> = sub_totals.iter().map(|&n| rng.random_range(0..=n)).collect();
        let view = SemanticView {
            doc_super: &doc_super,
            doc_pairs: &doc_pairs,
            label_in_sub: &label_in_sub,
            sub_totals: &sub_totals,
        };
        let got = semantic_proposal(&view, &h, nl);
        let want = direct_semantic(&view, &h, nl);
        worst = worst.max((got.iter().sum::<f64>() - 1.0).abs());
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }

        let na = rng.random_range(1..10);
        let vh = NnldaHyperparams::new(na, rng.random_range(0.01..2.0), rng.random_range(0.001..1.0));
        let doc_topics: Vec<u32> = (0..na).map(|_| rng.random_range(0..30)).collect();
        let topic_totals: Vec<u32> = (0..na).map(|_| rng.random_range(0..500)).collect();
        let word_in_topic: Vec<u32> = topic_totals.iter().map(|&n| rng.random_range(0..=n)).collect();
        let view = VisualView {
            doc_topics: &doc_topics,
            word_in_topic: &word_in_topic,
            topic_totals: &topic_totals,
        };
        let got = visual_proposal(&view, &vh, nl);
        let want = direct_visual(&view, &vh, nl);
        worst = worst.max((got.iter().sum::<f64>() - 1.0).abs());
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:.3e} > 1e-12"))?;
    Ok(format!("2000 states, max deviation {worst:.2e}"))
}

// ---------------------------------------------------------------- 2, 3

const BURN_IN: usize = 1000;
const SAMPLES: usize = 50_000;

fn empirical_tv(exact: &ExactPosterior, counts: &[u64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let emp: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    total_variation(&exact.probs, &emp)
}

fn criterion_2() -> Check {
    let mut hyper = PamHyperparams::new(2, 2, 0.8, 0.5);
    hyper.alpha_s = vec![0.6, 1.4, 1.1, 0.4];
    let doc = vec![vec![0usize, 3, 3]];

    // training sampler on a one-document corpus
    let exact = pam_exact_posterior(&doc[0], &PamExact::for_training(hyper.clone(), 4)).map_err(|e| e.to_string())?;
    let mut rng = seeded(202);
    let mut trainer = PamTrainer::new(&doc, 4, hyper.clone(), &mut rng).map_err(|e| e.to_string())?;
    let mut counts = vec![0u64; exact.probs.len()];
    for it in 0..BURN_IN + SAMPLES {
        trainer.sweep(&mut rng);
        if it >= BURN_IN {
            let paths: Vec<usize> = trainer.counts.assignments[0].iter().map(|&(s, t)| (s * 2 + t) as usize).collect();
            counts[exact.encode(&paths)] += 1;
        }
    }
    let tv_train = empirical_tv(&exact, &counts);

    // inference sampler against frozen corpus counts
    let vocab = LabelVocabulary::new(["a", "b", "c", "d"]).unwrap();
    let model = PamModel::from_counts(hyper, vec![3, 1, 0, 2, 0, 2, 3, 1], vocab, None, 0);
    let exact_inf = pam_exact_posterior(&doc[0], &PamExact::for_inference(&model)).map_err(|e| e.to_string())?;
    let mut chain = PamDocChain::new(&model, &doc[0], &mut rng);
    let mut counts = vec![0u64; exact_inf.probs.len()];
    for it in 0..BURN_IN + SAMPLES {
        chain.sweep(&mut rng);
        if it >= BURN_IN {
            let paths: Vec<usize> = chain.assignments().iter().map(|&(s, t)| s * 2 + t).collect();
            counts[exact_inf.encode(&paths)] += 1;
        }
    }
    let tv_infer = empirical_tv(&exact_inf, &counts);
    ensure(tv_train <= 0.02 && tv_infer <= 0.02, || {
        format!("TV training {tv_train:.4}, inference {tv_infer:.4} (bound 0.02)")
    })?;
    Ok(format!("64 path vectors; TV training {tv_train:.4}, inference {tv_infer:.4}"))
}

fn criterion_3() -> Check {
    let hyper = NnldaHyperparams::new(2, 0.5, 0.3);
    let mut rng = seeded(303);

    // region inference with a trained model
    let vocab = LabelVocabulary::new(["a", "b", "c"]).unwrap();
    let model = NnldaModel::from_counts(hyper, vec![5, 1, 1, 5, 3, 3], vec![5, 1, 3, 1, 5, 3], vocab, None, 0);
    let bag = [0usize, 1, 2];
    let exact = NnldaExact {
        num_topics: 2,
        num_labels: 3,
        alpha: hyper.alpha,
        psi: hyper.psi,
        base_a_lw: model.n_a_lw.iter().map(|&c| c as f64).collect(),
    };
    let region_pairs: Vec<(usize, usize)> = bag.iter().map(|&w| (0, w)).collect();
    let post = nnlda_exact_posterior(&region_pairs, &exact).map_err(|e| e.to_string())?;
    let mut chain = NnldaRegionChain::new(&model, &bag, &mut rng);
    let mut counts = vec![0u64; post.probs.len()];
    for it in 0..BURN_IN + SAMPLES {
        chain.sweep(&mut rng);
        if it >= BURN_IN {
            counts[post.encode(chain.assignments())] += 1;
        }
    }
    let tv_infer = empirical_tv(&post, &counts);

    // training sampler on three (lz, lw) pairs
    let pairs = vec![(0usize, 0usize), (1, 0), (1, 2)];
    let exact_train = NnldaExact {
        base_a_lw: vec![0.0; 6],
        ..exact
    };
    let post = nnlda_exact_posterior(&pairs, &exact_train).map_err(|e| e.to_string())?;
    let mut trainer = NnldaTrainer::new(pairs, 3, hyper, &mut rng).map_err(|e| e.to_string())?;
    let mut counts = vec![0u64; post.probs.len()];
    for it in 0..BURN_IN + SAMPLES {
        trainer.sweep(&mut rng);
        if it >= BURN_IN {
            let z: Vec<usize> = trainer.counts.assignments.iter().map(|&a| a as usize).collect();
            counts[post.encode(&z)] += 1;
        }
    }
    let tv_train = empirical_tv(&post, &counts);
    ensure(tv_train <= 0.02 && tv_infer <= 0.02, || {
        format!("TV inference {tv_infer:.4}, training {tv_train:.4} (bound 0.02)")
    })?;
    Ok(format!("8 topic vectors; TV inference {tv_infer:.4}, training {tv_train:.4}"))
}

// ---------------------------------------------------------------- 4

fn coupled_models() -> (PamModel, NnldaModel) {
    let vocab = LabelVocabulary::new(["a", "b", "c", "d"]).unwrap();
    let mut hyper = PamHyperparams::new(2, 2, 1.0, 0.01);
    hyper.alpha_s = vec![0.1, 0.1, 0.1, 0.1];
    let scale = 100_000u32;
    let phi_rows = [[0.6, 0.3, 0.07, 0.03], [0.03, 0.07, 0.3, 0.6]];
    let n_tl: Vec<u32> = phi_rows.iter().flatten().map(|p| (p * scale as f64) as u32).collect();
    let pam = PamModel::from_counts(hyper, n_tl, vocab.clone(), None, 0);
    let nn = NnldaModel::from_counts(
        NnldaHyperparams::new(2, 0.1, 0.01),
        vec![90, 10, 70, 30, 30, 70, 10, 90],
        vec![90, 60, 35, 15, 15, 35, 60, 90],
        vocab,
        None,
        0,
    );
    (pam, nn)
}

fn criterion_4() -> Check {
    let (pam, nn) = coupled_models();
    let mut image = ImageDoc {
        image_id: "img".into(),
        regions: vec![RegionRecord::new("r0"), RegionRecord::new("r1")],
    };
    image.regions[0].bag = Some(BagOfLabels::from_labels([0, 0, 0]));
    image.regions[1].bag = Some(BagOfLabels::from_labels([1, 2]));
    let cfg = DaConfig {
        n_samples: 2000,
        da_iters: 10,
        ..DaConfig::default()
    };
    let DaOutcome { state, .. } = run_da(&image, &pam, &nn, &cfg, &mut seeded(404)).map_err(|e| e.to_string())?;
    let prior = nn.label_prior();
    let evidence: Vec<Vec<f64>> = state.regions.iter().map(|r| visual_evidence(&r.visual, &prior)).collect();
    let exact = coupled_exact_posterior(
        &CoupledExact {
            hyper: pam.hyper.clone(),
            num_labels: 4,
            phi: pam.phi.clone(),
        },
        &evidence,
    )
    .map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut init_gap = 0.0f64;
    for (r, region) in state.regions.iter().enumerate() {
        worst = worst.max(total_variation(&region.posterior, &exact.labels[r]));
        init_gap = init_gap.max(total_variation(&state.posterior_history[0][r], &exact.labels[r]));
    }
    ensure(worst <= 0.05, || format!("max region TV {worst:.4} > 0.05"))?;
    Ok(format!("max region TV {worst:.4} (visual-only start was {init_gap:.4} away)"))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Check {
    let mut rng = seeded(505);
    let cfg = MomentMatchConfig::default();
    let n = 10_000;
    let rows: Vec<f64> = (0..n).flat_map(|_| sample_dirichlet(&[2.0, 1.0], &mut rng)).collect();
    let direct = moment_match(&rows, 2, &cfg).ok_or("moment matching returned nothing")?;

    // same docs through the count-based estimator: one supertopic, 2000 tokens per doc
    let len = 2000u32;
    let mut counts = PamCounts {
        num_super: 1,
        num_sub: 2,
        num_labels: 1,
        n_ds: vec![len; n],
        n_dst: Vec::with_capacity(2 * n),
        n_tl: vec![0, 0],
        n_t: vec![0, 0],
        assignments: vec![Vec::new(); n],
    };
    for p in rows.chunks(2) {
        let first = (0..len).filter(|_| rng.random::<f64>() < p[0]).count() as u32;
        counts.n_dst.extend([first, len - first]);
    }
    let est = estimate_alpha_s(&counts, &PamHyperparams::new(1, 2, 1.0, 0.01), &cfg);
    let est_sum: f64 = est.alpha_s.iter().sum();
    let est_mean = [est.alpha_s[0] / est_sum, est.alpha_s[1] / est_sum];

    let mean_err = (direct.mean[0] - 2.0 / 3.0).abs().max((est_mean[0] - 2.0 / 3.0).abs());
    let conc_err = ((direct.concentration - 3.0) / 3.0).abs().max(((est_sum - 3.0) / 3.0).abs());
    ensure(mean_err <= 0.02 && conc_err <= 0.15, || {
        format!("mean error {mean_err:.4}, concentration error {:.1}%", 100.0 * conc_err)
    })?;
    Ok(format!(
        "mean {:.4}/{:.4}, concentration {:.3} (proportions) and {:.3} (counts)",
        direct.mean[0], direct.mean[1], direct.concentration, est_sum
    ))
}

// ---------------------------------------------------------------- 6

/// Each row puts 0.45 on each label of its own pair and 0.05 on each of two
/// noise labels shared by all rows; `width = 2 * rows + 2`.
fn separated_rows(rows: usize) -> Vec<f64> {
    let width = 2 * rows + 2;
    (0..rows)
        .flat_map(|r| {
            (0..width).map(move |c| match c {
                c if c >= 2 * rows => 0.05,
                c if c / 2 == r => 0.45,
                _ => 0.0,
            })
        })
        .collect()
}

/// Smallest total L1 over row permutations; returns per-row distances.
fn best_matching(learned: &[f64], truth: &[f64], rows: usize, width: usize) -> Vec<f64> {
    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..n {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }
    let row = |m: &[f64], i: usize| m[i * width..(i + 1) * width].to_vec();
    permutations(rows)
        .into_iter()
        .map(|perm| {
            (0..rows)
                .map(|i| l1_distance(&row(learned, perm[i]), &row(truth, i)))
                .collect::<Vec<f64>>()
        })
        .min_by(|a, b| a.iter().sum::<f64>().total_cmp(&b.iter().sum::<f64>()))
        .unwrap()
}

fn criterion_6() -> Check {
    let (ns, nt, nl, na) = (2, 4, 10, 4);
    let phi = separated_rows(nt);
    let truth = PamGenerative {
        num_super: ns,
        num_sub: nt,
        num_labels: nl,
        alpha0: 1.0,
        alpha_s: vec![1.0, 1.0, 0.2, 0.2, 0.2, 0.2, 1.0, 1.0],
        phi: phi.clone(),
    };
    let mut rng = seeded(606);
    let tokens: Vec<Vec<usize>> = (0..500)
        .map(|_| {
            let len = rng.random_range(10..=20);
            sample_generative_pam(&truth, len, &mut rng).labels
        })
        .collect();
    let vocab = LabelVocabulary::new((0..nl).map(|l| format!("l{l}"))).unwrap();
    let cfg = PamTrainConfig {
        iters: 500,
        ..PamTrainConfig::default()
    };
    let model = train_pam_tokens(&tokens, vocab.clone(), PamHyperparams::new(ns, nt, 1.0, 0.01), &cfg, &mut rng)
        .map_err(|e| e.to_string())?;
    let pam_rows = best_matching(&model.phi, &phi, nt, nl);

    let gamma = separated_rows(na);
    let theta: Vec<f64> = (0..nl)
        .flat_map(|l| {
            (0..na).map(move |a| match l {
                l if l >= 2 * na => 1.0 / na as f64,
                l if a == l / 2 => 0.9,
                _ => 0.1 / (na - 1) as f64,
            })
        })
        .collect();
    let visual = NnldaGenerative {
        num_topics: na,
        num_labels: nl,
        theta,
        gamma: gamma.clone(),
    };
    let docs: Vec<ImageDoc> = (0..500)
        .map(|d| {
            let regions = (0..rng.random_range(5..=9))
                .map(|r| {
                    let lz = rng.random_range(0..nl);
                    let size = rng.random_range(3..=8);
                    let mut rec = RegionRecord::new(format!("r{r}"));
                    rec.gt_label = Some(lz);
                    rec.bag = Some(vsim::nnlda::sample_generative_nnlda(&visual, lz, size, &mut rng).0);
                    rec
                })
                .collect();
            ImageDoc {
                image_id: format!("d{d}"),
                regions,
            }
        })
        .collect();
    let corpus = Corpus {
        docs,
        vocab,
        feature_spaces: vec![],
    };
    let nn = train_nnlda(&corpus, NnldaHyperparams::new(na, 1.0, 0.01), 500, &mut rng).map_err(|e| e.to_string())?;
    let nn_rows = best_matching(&nn.gamma, &gamma, na, nl);

    let worst_pam = pam_rows.iter().copied().fold(0.0, f64::max);
    let worst_nn = nn_rows.iter().copied().fold(0.0, f64::max);
    ensure(worst_pam <= 0.1 && worst_nn <= 0.1, || {
        format!("worst row L1: phi {worst_pam:.4}, gamma {worst_nn:.4} (bound 0.1)")
    })?;
    Ok(format!("worst row L1: phi {worst_pam:.4}, gamma {worst_nn:.4}"))
}

// ---------------------------------------------------------------- 7

/// Two scenes over 16 labels: subtopic `t` emits labels `4t..4t+4`,
/// supertopic 0 uses subtopics 0 and 1, supertopic 1 uses 2 and 3. Labels
/// `0..4` and `8..12` each own a visual topic; for `l` in `4..8`, `l` and
/// `l + 8` share one, so only the scene can tell them apart.
fn anchored_spec(seed: u64) -> SyntheticSpec {
    let (nl, na, nt) = (16, 12, 4);
    let mut phi = vec![0.1 / (nl - 4) as f64; nt * nl];
    for t in 0..nt {
        for l in 4 * t..4 * t + 4 {
            phi[t * nl + l] = 0.9 / 4.0;
        }
    }
    let topic = |l: usize| match l {
        0..=3 => l,
        8..=11 => l - 4,
        _ => 8 + l % 4,
    };
    let mut theta = vec![0.1 / (na - 1) as f64; nl * na];
    for l in 0..nl {
        theta[l * na + topic(l)] = 0.9;
    }
    let mut gamma = vec![0.0; na * nl];
    for a in 0..na {
        let row = &mut gamma[a * nl..(a + 1) * nl];
        if a < 8 {
            row.iter_mut().for_each(|g| *g = 0.2 / (nl - 1) as f64);
            row[if a < 4 { a } else { a + 4 }] = 0.8;
        } else {
            row.iter_mut().for_each(|g| *g = 0.2 / (nl - 2) as f64);
            row[a - 4] = 0.4;
            row[a + 4] = 0.4;
        }
    }
    SyntheticSpec {
        train_docs: 1000,
        test_docs: 200,
        doc_len: SizeRange::new(6, 10),
        bag_size: SizeRange::new(2, 5),
        pam: PamGenerative {
            num_super: 2,
            num_sub: nt,
            num_labels: nl,
            alpha0: 0.1,
            alpha_s: vec![1.0, 1.0, 0.01, 0.01, 0.01, 0.01, 1.0, 1.0],
            phi,
        },
        nnlda: NnldaGenerative {
            num_topics: na,
            num_labels: nl,
            theta,
            gamma,
        },
        features: None,
        seed,
    }
}

fn criterion_7() -> Check {
    let spec = anchored_spec(707);
    let data = generate_synthetic(&spec).map_err(|e| e.to_string())?;
    let mut rng = seeded(707);
    let pam = train_pam(
        &data.train,
        PamHyperparams::new(2, 4, 1.0, 0.01),
        &PamTrainConfig {
            iters: 300,
            ..PamTrainConfig::default()
        },
        &mut rng,
    )
    .map_err(|e| e.to_string())?;
    let nn = train_nnlda(&data.train, NnldaHyperparams::new(12, 0.1, 0.01), 300, &mut rng).map_err(|e| e.to_string())?;
    let cfg = DaConfig {
        n_samples: 200,
        ..DaConfig::default()
    };
    let results: Vec<(Vec<usize>, Vec<usize>, f64, f64)> = data
        .test
        .docs
        .par_iter()
        .enumerate()
        .map(|(i, doc)| {
            let mut rng = substream(707, &[3, i as u64]);
            let out = run_da(doc, &pam, &nn, &cfg, &mut rng).expect("inference");
            let init: Vec<usize> = out.state.posterior_history[0].iter().map(|p| argmax(p)).collect();
            let last: Vec<usize> = out.decisions.iter().map(|d| d.map_label).collect();
            let grounded = infer_pam_doc(&doc.gt_labels(), &pam, cfg.pam_infer_iters, &mut rng).state.subtopic_mixture();
            let kl = |k: usize| symmetric_kl(&out.state.scene_history[k].subtopic_mixture(), &grounded, DEFAULT_KL_FLOOR).unwrap();
            (init, last, kl(0), kl(out.state.scene_history.len() - 1))
        })
        .collect();
    let truth: Vec<BTreeSet<usize>> = data
        .test
        .docs
        .iter()
        .flat_map(|d| d.gt_labels().into_iter().map(|l| BTreeSet::from([l])))
        .collect();
    let init_ranked: Vec<Vec<usize>> = results.iter().flat_map(|r| r.0.iter().map(|&l| vec![l])).collect();
    let joint_ranked: Vec<Vec<usize>> = results.iter().flat_map(|r| r.1.iter().map(|&l| vec![l])).collect();
    let init_acc = top_n_accuracy(&init_ranked, &truth, 1).unwrap().normalized;
    let joint_acc = top_n_accuracy(&joint_ranked, &truth, 1).unwrap().normalized;
    let n = results.len() as f64;
    let kl_init = results.iter().map(|r| r.2).sum::<f64>() / n;
    let kl_joint = results.iter().map(|r| r.3).sum::<f64>() / n;
    let detail = format!("top-1 {init_acc:.3} -> {joint_acc:.3}, scene KL {kl_init:.3} -> {kl_joint:.3}");
    ensure(joint_acc >= init_acc && kl_joint < kl_init, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 8

/// Frequent labels `0..6` each own a distinctive visual topic. Rare labels
/// `6..12` each own a topic that mostly emits a frequent look-alike.
fn imbalanced_spec(seed: u64) -> SyntheticSpec {
    let (nl, frequent) = (12, 6);
    let na = nl;
    let mut phi: Vec<f64> = (0..nl).map(|k| ((k + 1) as f64).powf(-0.75)).collect();
    let z: f64 = phi.iter().sum();
    phi.iter_mut().for_each(|p| *p /= z);
    let mut theta = vec![0.02 / (na - 1) as f64; nl * na];
    for l in 0..nl {
        theta[l * na + l] = 0.98;
    }
    let mut gamma = vec![0.0; na * nl];
    for a in 0..na {
        let row = &mut gamma[a * nl..(a + 1) * nl];
        if a < frequent {
            row.iter_mut().for_each(|g| *g = 0.05 / (nl - 1) as f64);
            row[a] = 0.95;
        } else {
            row.iter_mut().for_each(|g| *g = 0.05 / (nl - 2) as f64);
            row[a - frequent] = 0.55;
            row[a] = 0.40;
        }
    }
    let pam = PamGenerative {
        num_super: 1,
        num_sub: 1,
        num_labels: nl,
        alpha0: 1.0,
        alpha_s: vec![1.0],
        phi,
    };
    let nnlda = NnldaGenerative {
        num_topics: na,
        num_labels: nl,
        theta,
        gamma,
    };
    SyntheticSpec {
        train_docs: 1500,
        test_docs: 600,
        doc_len: SizeRange::new(5, 9),
        bag_size: SizeRange::new(3, 7),
        pam,
        nnlda,
        features: None,
        seed,
    }
}

fn criterion_8() -> Check {
    let spec = imbalanced_spec(808);
    let data = generate_synthetic(&spec).map_err(|e| e.to_string())?;
    let nl = spec.num_labels();
    let mut freq = vec![0usize; nl];
    data.train.docs.iter().flat_map(|d| d.gt_labels()).for_each(|l| freq[l] += 1);
    let mut by_freq: Vec<usize> = (0..nl).collect();
    by_freq.sort_by_key(|&l| (freq[l], l));
    let rare: BTreeSet<usize> = by_freq[..nl / 4].iter().copied().collect();

    let mut rng = seeded(808);
    let nn = train_nnlda(&data.train, NnldaHyperparams::new(nl, 0.1, 0.01), 300, &mut rng).map_err(|e| e.to_string())?;
    let (mut total, mut nn_hits, mut vote_hits) = (0usize, 0usize, 0usize);
    for doc in &data.test.docs {
        for region in &doc.regions {
            let gt = region.gt_label.unwrap();
            if !rare.contains(&gt) {
                continue;
            }
            let bag = region.bag.as_ref().unwrap();
            let theta_r = infer_region_topics(bag, &nn, 100, &mut rng).map_err(|e| e.to_string())?;
            total += 1;
            nn_hits += (argmax(&label_likelihood(&theta_r, &nn)) == gt) as usize;
            vote_hits += (bag.majority_label() == Some(gt)) as usize;
        }
    }
    ensure(total > 0, || "no rare-label test regions".into())?;
    let (acc_nn, acc_vote) = (nn_hits as f64 / total as f64, vote_hits as f64 / total as f64);
    let detail = format!(
        "rarest quartile {:?}, {total} regions: visual model {acc_nn:.3} vs majority vote {acc_vote:.3}",
        rare
    );
    ensure(acc_nn > acc_vote, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 9

fn vsim(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_vsim"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("vsim {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn criterion_9() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = |p: &str| dir.path().join(p);
    let s = |p: &str| d(p).to_string_lossy().into_owned();
    vsim(&["synth", "--out-dir", &s("data"), "--seed", "9", "--train-docs", "60", "--test-docs", "12",
        "--num-super", "3", "--num-sub", "6", "--num-topics", "6", "--num-labels", "12"])?;
    let mut runs = Vec::new();
    for (tag, workers) in [("a", "1"), ("b", "1"), ("c", "4")] {
        let models = s(&format!("models_{tag}"));
        vsim(&["train", "--train", &s("data/train.tsv"), "--out-dir", &models, "--seed", "7", "--workers", workers,
            "--iters", "40", "--num-super", "3", "--num-sub", "6", "--num-topics", "6"])?;
        let out = s(&format!("infer_{tag}"));
        vsim(&["infer", "--models", &models, "--corpus", &s("data/test.tsv"), "--out-dir", &out, "--seed", "7",
            "--workers", workers, "--n-samples", "30", "--pam-infer-iters", "20", "--nnlda-infer-iters", "20"])?;
        let files = [
            d(&format!("models_{tag}/pam.json")),
            d(&format!("models_{tag}/nnlda.json")),
            d(&format!("infer_{tag}/decisions.tsv")),
            d(&format!("infer_{tag}/scenes.tsv")),
        ];
        runs.push(files.iter().map(|f| read(f)).collect::<Result<Vec<_>, _>>()?);
    }
    ensure(runs[0] == runs[1], || "two runs with equal seeds differ".into())?;
    ensure(runs[0] == runs[2], || "1 and 4 workers differ".into())?;
    Ok("model, decision and scene files identical across runs and 1/4 workers".into())
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Check {
    let mut rng = seeded(1010);
    let mut checks = 0usize;

    // count conservation after every sweep
    let spec = SyntheticSpec::random(
        ModelShape {
            num_super: 2,
            num_sub: 4,
            num_topics: 4,
            num_labels: 10,
        },
        &TruthPriors::default(),
        40,
        5,
        10,
    );
    let data = generate_synthetic(&spec).map_err(|e| e.to_string())?;
    let tokens = data.train.label_tokens();
    let mut trainer = PamTrainer::new(&tokens, 10, PamHyperparams::new(2, 4, 1.0, 0.1), &mut rng).unwrap();
    let pairs = vsim::nnlda::training_pairs(&data.train).unwrap();
    let mut vtrainer = NnldaTrainer::new(pairs, 10, NnldaHyperparams::new(4, 0.1, 0.1), &mut rng).unwrap();
    for sweep in 0..50 {
        trainer.sweep(&mut rng);
        if sweep >= 10 {
            trainer.update_alpha(&MomentMatchConfig::default());
        }
        vtrainer.sweep(&mut rng);
        trainer.counts.check_consistency(&tokens).map_err(|e| format!("semantic sweep {sweep}: {e}"))?;
        vtrainer.counts.check_consistency().map_err(|e| format!("visual sweep {sweep}: {e}"))?;
        checks += 2;
    }

    // posterior normalization after every DA iteration
    let pam = trainer.into_model(data.train.vocab.clone(), None, 50);
    let nn = vtrainer.into_model(data.train.vocab.clone(), None, 50);
    let cfg = DaConfig {
        n_samples: 20,
        pam_infer_iters: 20,
        nnlda_infer_iters: 20,
        ..DaConfig::default()
    };
    for doc in &data.test.docs {
        let out = run_da(doc, &pam, &nn, &cfg, &mut rng).map_err(|e| e.to_string())?;
        for (k, step) in out.state.posterior_history.iter().enumerate() {
            for p in step {
                let sum: f64 = p.iter().sum();
                ensure(p.iter().all(|&x| x >= 0.0) && (sum - 1.0).abs() <= 1e-9, || {
                    format!("{} iteration {k}: posterior sums to {sum}", doc.image_id)
                })?;
                checks += 1;
            }
        }
    }

    // ε-ball monotonicity and exhaustive-scan equivalence
    let points: Vec<Vec<f64>> = (0..300).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
    let labels: Vec<usize> = (0..300).map(|_| rng.random_range(0..5)).collect();
    let owners: Vec<(String, String)> = (0..300).map(|i| (format!("i{i}"), "r".to_string())).collect();
    let index = FeatureSpaceIndex::from_points("s", 3, points, labels.clone(), owners).map_err(|e| e.to_string())?;
    for _ in 0..200 {
        let q: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
        let (e1, e2) = (rng.random_range(0.0..0.3), rng.random_range(0.3..0.6));
        let bag = |eps, strategy| {
            let hits = index.within(&q, eps, DistanceNorm::Euclidean, strategy, None).unwrap();
            BagOfLabels::from_labels(hits.into_iter().map(|(_, i)| labels[i]))
        };
        let (small, large) = (bag(e1, SearchStrategy::PivotPruned), bag(e2, SearchStrategy::PivotPruned));
        ensure(small.is_subset_of(&large), || "ε-ball not monotone".into())?;
        ensure(large == bag(e2, SearchStrategy::Exhaustive), || "pruned search differs from exhaustive".into())?;
        checks += 2;
    }

    // AP under monotone transforms; symmetric KL
    for _ in 0..500 {
        let n = rng.random_range(2..30);
        let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let mut rel: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        rel[0] = true;
        let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        ensure(
            average_precision(&scores, &rel).unwrap() == average_precision(&transformed, &rel).unwrap(),
            || "AP changed under a monotone transform".into(),
        )?;
        let k = rng.random_range(1..10);
        let p = sample_dirichlet(&vec![0.5; k], &mut rng);
        let q = sample_dirichlet(&vec![0.5; k], &mut rng);
        let (pq, qp) = (symmetric_kl(&p, &q, DEFAULT_KL_FLOOR).unwrap(), symmetric_kl(&q, &p, DEFAULT_KL_FLOOR).unwrap());
        ensure(pq == qp && pq >= 0.0, || format!("KL asymmetric or negative: {pq} {qp}"))?;
        ensure(symmetric_kl(&p, &p, DEFAULT_KL_FLOOR).unwrap() == 0.0, || "KL(p, p) != 0".into())?;
        checks += 3;
    }
    Ok(format!("{checks} invariant checks"))
}

fn main() {
    let criteria: [(&str, u64, fn() -> Check); 10] = [
        ("proposal correctness", 5, criterion_1),
        ("exact posterior, semantic model", 30, criterion_2),
        ("exact posterior, visual model", 30, criterion_3),
        ("coupled posterior", 120, criterion_4),
        ("hyperparameter recovery", 10, criterion_5),
        ("generative recovery", 240, criterion_6),
        ("init vs joint on synthetic images", 300, criterion_7),
        ("rare labels vs majority vote", 120, criterion_8),
        ("determinism", 300, criterion_9),
        ("invariant suite", 120, criterion_10),
    ];
    let only: Option<usize> = std::env::var("VSIM_CRITERION").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        let start = Instant::now();
        let result = run();
        let elapsed = start.elapsed();
        let limit = Duration::from_secs(*budget);
        let (ok, detail) = match result {
            Ok(d) if elapsed <= limit => (true, d),
            Ok(d) => (false, format!("{d}; exceeded {budget}s")),
            Err(e) => (false, e),
        };
        failed += !ok as usize;
        println!(
            "{} {:>2} {name}: {detail} [{:.1}s/{budget}s]",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            elapsed.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
