//! Runs the repeated-sampling evaluation and prints its table.
//!
//! With two checkpoint paths it evaluates trained models on the bundled
//! corpus; otherwise it uses exact models on synthetic text.

use agr_lab::agr::RefineConfig;
use agr_lab::checkpoint::Checkpoint;
use agr_lab::corpus::BUNDLED;
use agr_lab::dataset::TokenDataset;
use agr_lab::eval::{evaluate, report_table, EvalConfig};
use agr_lab::oracle::{MarkovSource, NextOracle, SecondToLastOracle};
use agr_lab::tokenizer::Scheme;

fn main() -> agr_lab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = EvalConfig { samples: 1000, runs: 5, grid: vec![(3, 0.05), (3, 0.5), (15, 0.05)], ..Default::default() };
    let reports = if let [next, refiner] = args.as_slice() {
        let f_n = Checkpoint::load(next.as_ref())?;
        let f_s = Checkpoint::load(refiner.as_ref())?;
        cfg.refine = RefineConfig { l: 4, ..Default::default() };
        let data = TokenDataset::from_text(BUNDLED, Scheme::Char)?;
        evaluate(&f_n.params, &f_s.params, &data, &cfg)?
    } else {
        let src = MarkovSource::random(20, 1, 0.3, 1)?;
        let text: String = src.sample(50_000, &mut rand::rng()).iter().map(|&x| char::from(b'A' + x as u8)).collect();
        let data = TokenDataset::from_text(&text, Scheme::Char)?;
        let f_n = NextOracle { source: &src, block_size: 16 };
        let f_s = SecondToLastOracle { source: &src, l: 2, block_size: 16 };
        cfg.refine = RefineConfig { l: 2, ..Default::default() };
        cfg.dataset_label = "markov".into();
        evaluate(&f_n, &f_s, &data, &cfg)?
    };
    print!("{}", report_table(&reports));
    Ok(())
}
