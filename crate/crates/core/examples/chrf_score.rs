//! Character n-gram F-score for single sentences and a small corpus.

use adaptgpt::metrics::{chrf, chrf_stats, corpus_chrf, ChrfParams};
use adaptgpt::Result;

fn main() -> Result<()> {
    let p = ChrfParams::default();
    let pairs = [
        ("the cat sat on the mat", "the cat sat on the mat"),
        ("the cat sat on a mat", "the cat sat on the mat"),
        ("a dog lay by the door", "the cat sat on the mat"),
    ];
    for (h, r) in pairs {
        println!("{:>6.2}  {h:?} vs {r:?}", chrf(h, r, &p)?);
    }
    let s = chrf_stats(pairs[1].0, pairs[1].1, &p)?;
    println!("order-1 (matches, hyp, ref) = {:?}", s.orders[0]);

    let hyps: Vec<String> = pairs.iter().map(|(h, _)| h.to_string()).collect();
    let refs: Vec<String> = pairs.iter().map(|(_, r)| r.to_string()).collect();
    println!("corpus chrF {:.2}", corpus_chrf(&hyps, &refs, &p)?);
    Ok(())
}
