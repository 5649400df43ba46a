//! Score candidate reports and pick a winner among expert outputs.

use expertformer::harness::score_texts;
use expertformer::metrics::vote;

fn main() -> expertformer::Result<()> {
    let reference = "there is a red square in the upper left . the upper right is clear .";
    let experts = [
        "there is a red square in the upper left . the upper right is clear .",
        "there is a red disc in the upper left . the upper right is clear .",
        "there is a red square in the upper left . there is a blue ring in the upper right .",
        "the upper left is clear . the upper right is clear .",
    ];
    let (winner, scores) = vote(&experts)?;
    for (m, (text, s)) in experts.iter().zip(&scores).enumerate() {
        let mark = if m == winner { "*" } else { " " };
        println!("{mark}{m} {s:>8.4}  {text}");
    }
    let refs = vec![reference; experts.len()];
    print!("{}", score_texts(&experts, &refs)?.table());
    Ok(())
}
