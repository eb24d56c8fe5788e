//! Trains the ablation variants on the synthetic benchmark and prints test
//! Recall@1 per seed.
//!
//! ```text
//! cargo run --release -p intrabatch --example ablation -- [seeds] [first_seed] [key=value ...]
//! ```

use std::time::Instant;

use intrabatch::batching::Side;
use intrabatch::config::{InferMode, RunConfig};
use intrabatch::gradcheck::GradCheckOptions;
use intrabatch::inference::{ensemble_concat, EnsembleSpec};
use intrabatch::metrics::recall_at_k;
use intrabatch::pipeline::{embed, gradcheck_model, load_data, split, train};

fn main() -> intrabatch::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map_or(5, |s| s.parse().expect("seed count"));
    let first_seed: u64 = args.next().map_or(0, |s| s.parse().expect("first seed"));
    let mut base = RunConfig::default();
    for kv in args {
        let (k, v) = kv.split_once('=').expect("key=value");
        base.set(k, v)?;
    }
    if base.mpn.ff_dim != 2 * base.mpn.dim {
        base.mpn.ff_dim = 2 * base.mpn.dim;
    }
    base.validate()?;

    if std::env::var_os("GRADCHECK").is_some() {
        let t = Instant::now();
        let gc = gradcheck_model(&RunConfig::gradcheck_default(), GradCheckOptions::default())?;
        print!("{}", gc.render());
        println!("gradcheck took {:.2?}", t.elapsed());
    }

    let mut runs: Vec<[f64; 5]> = Vec::new();
    for seed in first_seed..first_seed + seeds {
        let t = Instant::now();
        let mut cfg = base.clone();
        cfg.seed = seed;
        let ds = load_data(&cfg)?;
        let sp = split(&cfg, &ds)?;
        let test = ds.side(&sp, Side::Test)?;

        let full = train(&cfg, &ds, &sp)?;
        let r_bb =
            recall_at_k(&embed(&cfg, &full.model, &test, InferMode::Backbone)?, &[1])?.values[0].1;
        let r_mpn = recall_at_k(
            &embed(&cfg, &full.model, &test, InferMode::MpnReciprocal)?,
            &[1],
        )?
        .values[0]
            .1;

        let mut ce = cfg.clone();
        ce.loss.use_mpn_loss = false;
        let ce_out = train(&ce, &ds, &sp)?;
        let r_ce = recall_at_k(
            &embed(&ce, &ce_out.model, &test, InferMode::Backbone)?,
            &[1],
        )?
        .values[0]
            .1;

        let mut other = cfg.clone();
        other.seed = seed + 1000;
        let second = train(&other, &ds, &sp)?;
        let r_second = recall_at_k(
            &embed(&other, &second.model, &test, InferMode::Backbone)?,
            &[1],
        )?
        .values[0]
            .1;
        let ens = ensemble_concat(
            &EnsembleSpec {
                models: vec![full.model.clone(), second.model],
            },
            &test,
        )?;
        let r_ens = recall_at_k(&ens, &[1])?.values[0].1;

        let first = full.log.first().map_or(0.0, |e| e.total);
        let last = full.log.last().map_or(0.0, |e| e.total);
        println!(
            "seed {seed} ce {r_ce:.4} mpn+aux {r_bb:.4} mpn-emb {r_mpn:.4} second {r_second:.4} ensemble {r_ens:.4} loss {first:.3}->{last:.3} ({:.1?})",
            t.elapsed()
        );
        runs.push([r_ce, r_bb, r_mpn, r_second, r_ens]);
    }
    let n = seeds as f64;
    let mean = |i: usize| runs.iter().map(|r| r[i]).sum::<f64>() / n;
    println!(
        "mean ce {:.4} mpn+aux {:.4} mpn-emb {:.4} second {:.4} ensemble {:.4}",
        mean(0),
        mean(1),
        mean(2),
        mean(3),
        mean(4)
    );
    let paired = |name: &str, a: usize, b: usize| {
        let d: Vec<f64> = runs.iter().map(|r| r[a] - r[b]).collect();
        let m = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        println!("diff {name} {m:+.4} se {:.4}", (var / n).sqrt());
    };
    paired("mpn+aux-ce", 1, 0);
    paired("mpn-emb-backbone", 2, 1);
    paired("ensemble-first", 4, 1);
    Ok(())
}
