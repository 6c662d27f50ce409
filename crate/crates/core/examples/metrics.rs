//! ROUGE, BLEU and the Lead baseline on hand-made examples, and a report
//! written as CSV and JSON.

use dahg::corpus::tokenize;
use dahg::evaluation::{bleu, lead, rouge_l, rouge_n, Report};

fn toks(s: &str) -> Vec<String> {
    tokenize(s).expect("non-empty")
}

pub fn main() -> dahg::error::Result<()> {
    let reference = toks("the cat sat on the mat");
    let candidate = toks("the cat sat on a mat");
    for n in 1..=2 {
        let s = rouge_n(&candidate, &reference, n);
        println!("ROUGE-{n}: P {:.3} R {:.3} F {:.3}", s.precision, s.recall, s.f1);
    }
    println!("ROUGE-L F {:.3}", rouge_l(&candidate, &reference).f1);
    let b = bleu(std::slice::from_ref(&candidate), std::slice::from_ref(&reference), 4);
    println!("BLEU {:.4}, precisions {:?}, BP {:.3}", b.bleu, b.precisions, b.brevity_penalty);

    // unsegmented CJK falls back to characters
    println!("CJK tokens: {:?}", toks("今天天气很好"));

    let document = toks("markets rallied on friday . analysts expect more gains");
    println!("lead: {}", lead(&document, 30).join(" "));

    let rows = vec![
        ("a".to_owned(), candidate, reference.clone()),
        ("b".to_owned(), lead(&document, 30), toks("markets rally")),
    ];
    let mut report = Report::default();
    report.add_system("demo", &rows);
    let summary = report.summary("demo").expect("added");
    println!("demo system: R-1 {:.3} R-2 {:.3} R-L {:.3} BLEU {:.3}", summary.rouge_1, summary.rouge_2, summary.rouge_l, summary.bleu);
    let dir = tempfile::tempdir()?;
    report.write(dir.path().join("scores.csv"), dir.path().join("scores.json"))?;
    println!("wrote scores.csv and scores.json");
    Ok(())
}
