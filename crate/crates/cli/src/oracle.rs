//! Samplers checked against exact posteriors on random instances small
//! enough to enumerate.

use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use rand::Rng;
use serde::{Deserialize, Serialize};
use vsim::corpus::{ImageDoc, LabelVocabulary, RegionRecord};
use vsim::eval::oracle::{coupled_exact_posterior, nnlda_exact_posterior, pam_exact_posterior};
use vsim::eval::oracle::{CoupledExact, ExactPosterior, NnldaExact, PamExact};
use vsim::joint::{run_da, visual_evidence, DaConfig};
use vsim::math::total_variation;
use vsim::neighborhood::BagOfLabels;
use vsim::nnlda::{NnldaHyperparams, NnldaModel, NnldaRegionChain};
use vsim::pam::{PamDocChain, PamHyperparams, PamModel};
use vsim::rng::{substream, STREAM_ORACLE};
use vsim::VsimError;

use crate::config::{from_config, layered, read_config, CommonArgs, Layered};

/// Check the samplers against exact enumeration on small random instances.
#[derive(Debug, Args)]
pub struct OracleArgs {
    /// TOML file with defaults for any of the flags below
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub settings: OracleSettings,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct OracleSettings {
    /// Random instances per check [default: 3]
    #[arg(long)]
    pub instances: Option<usize>,
    /// Recorded sweeps per chain [default: 50000]
    #[arg(long)]
    pub samples: Option<usize>,
    /// Discarded sweeps per chain [default: 1000]
    #[arg(long)]
    pub burn_in: Option<usize>,
    /// Largest total variation accepted for a chain [default: 0.03]
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Largest per-region total variation accepted for inference [default: 0.05]
    #[arg(long)]
    pub da_tolerance: Option<f64>,
}
layered!(OracleSettings {
    instances,
    samples,
    burn_in,
    tolerance,
    da_tolerance,
});

fn vocab(n: usize) -> LabelVocabulary {
    LabelVocabulary::new((0..n).map(|l| format!("l{l}"))).expect("distinct names")
}

fn counts<R: Rng>(n: usize, max: u32, rng: &mut R) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..=max)).collect()
}

fn empirical_tv(exact: &ExactPosterior, hits: &[u64]) -> f64 {
    let n: u64 = hits.iter().sum();
    let emp: Vec<f64> = hits.iter().map(|&c| c as f64 / n as f64).collect();
    total_variation(&exact.probs, &emp)
}

fn random_pam<R: Rng>(rng: &mut R) -> PamModel {
    let mut hyper = PamHyperparams::new(2, 2, rng.random_range(0.3..2.0), rng.random_range(0.05..1.0));
    hyper.alpha_s = (0..4).map(|_| rng.random_range(0.2..1.5)).collect();
    PamModel::from_counts(hyper, counts(8, 6, rng), vocab(4), None, 0)
}

fn random_nnlda<R: Rng>(labels: usize, rng: &mut R) -> NnldaModel {
    let hyper = NnldaHyperparams::new(2, rng.random_range(0.1..1.0), rng.random_range(0.05..0.5));
    NnldaModel::from_counts(hyper, counts(labels * 2, 8, rng), counts(2 * labels, 8, rng), vocab(labels), None, 0)
}

fn check_pam<R: Rng>(s: &OracleSettings, rng: &mut R) -> Result<f64> {
    let model = random_pam(rng);
    let doc: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
    let exact = pam_exact_posterior(&doc, &PamExact::for_inference(&model))?;
    let mut chain = PamDocChain::new(&model, &doc, rng);
    let mut hits = vec![0u64; exact.probs.len()];
    for it in 0..s.burn_in.unwrap_or(1000) + s.samples.unwrap_or(50_000) {
        chain.sweep(rng);
        if it >= s.burn_in.unwrap_or(1000) {
            let paths: Vec<usize> = chain.assignments().iter().map(|&(a, t)| a * 2 + t).collect();
            hits[exact.encode(&paths)] += 1;
        }
    }
    Ok(empirical_tv(&exact, &hits))
}

fn check_nnlda<R: Rng>(s: &OracleSettings, rng: &mut R) -> Result<f64> {
    let model = random_nnlda(3, rng);
    let bag: Vec<usize> = (0..3).map(|_| rng.random_range(0..3)).collect();
    let exact = NnldaExact {
        num_topics: 2,
        num_labels: 3,
        alpha: model.hyper.alpha,
        psi: model.hyper.psi,
        base_a_lw: model.n_a_lw.iter().map(|&c| c as f64).collect(),
    };
    let pairs: Vec<(usize, usize)> = bag.iter().map(|&w| (0, w)).collect();
    let post = nnlda_exact_posterior(&pairs, &exact)?;
    let mut chain = NnldaRegionChain::new(&model, &bag, rng);
    let mut hits = vec![0u64; post.probs.len()];
    for it in 0..s.burn_in.unwrap_or(1000) + s.samples.unwrap_or(50_000) {
        chain.sweep(rng);
        if it >= s.burn_in.unwrap_or(1000) {
            hits[post.encode(chain.assignments())] += 1;
        }
    }
    Ok(empirical_tv(&post, &hits))
}

fn check_joint<R: Rng>(rng: &mut R) -> Result<f64> {
    let pam = random_pam(rng);
    let nn = random_nnlda(4, rng);
    let mut image = ImageDoc {
        image_id: "oracle".into(),
        regions: vec![RegionRecord::new("r0"), RegionRecord::new("r1")],
    };
    for r in &mut image.regions {
        let size = rng.random_range(1..4);
        r.bag = Some(BagOfLabels::from_labels((0..size).map(|_| rng.random_range(0..4))));
    }
    let cfg = DaConfig {
        n_samples: 2000,
        da_iters: 10,
        ..DaConfig::default()
    };
    let state = run_da(&image, &pam, &nn, &cfg, rng)?.state;
    let prior = nn.label_prior();
    let evidence: Vec<Vec<f64>> = state.regions.iter().map(|r| visual_evidence(&r.visual, &prior)).collect();
    let exact = coupled_exact_posterior(
        &CoupledExact {
            hyper: pam.hyper.clone(),
            num_labels: 4,
            phi: pam.phi.clone(),
        },
        &evidence,
    )?;
    Ok(state
        .regions
        .iter()
        .zip(&exact.labels)
        .map(|(r, e)| total_variation(&r.posterior, e))
        .fold(0.0, f64::max))
}

pub fn run(args: OracleArgs) -> Result<()> {
    let table = read_config(args.config.as_deref())?;
    let common = args.common.over(from_config(&table)?);
    let s = args.settings.over(from_config(&table)?);
    let seed = common.seed();
    let tol = s.tolerance.unwrap_or(0.03);
    let da_tol = s.da_tolerance.unwrap_or(0.05);

    let mut failures = Vec::new();
    for i in 0..s.instances.unwrap_or(3) as u64 {
        let results = [
            ("semantic chain", check_pam(&s, &mut substream(seed, &[STREAM_ORACLE, 1, i]))?, tol),
            ("visual chain", check_nnlda(&s, &mut substream(seed, &[STREAM_ORACLE, 2, i]))?, tol),
            ("joint inference", check_joint(&mut substream(seed, &[STREAM_ORACLE, 3, i]))?, da_tol),
        ];
        for (name, tv, bound) in results {
            let verdict = if tv <= bound { "ok" } else { "FAIL" };
            println!("instance {i}\t{name}\tTV {tv:.4}\tbound {bound}\t{verdict}");
            if tv > bound {
                failures.push(format!("instance {i} {name}: TV {tv:.4} > {bound}"));
            }
        }
    }
    if !failures.is_empty() {
        return Err(VsimError::Numerical(failures.join("; ")).into());
    }
    Ok(())
}
