//! Trainable parameters per module and the cost of extra experts.

use expertformer::harness::param_count;
use expertformer::model::ModelConfig;

fn main() {
    let base = ModelConfig::default();
    print!("{}", param_count(&base).render(false));
    let one = param_count(&ModelConfig { num_expert: 1, ..base.clone() }).total;
    for m in [1, 3, 7, 9] {
        let total = param_count(&ModelConfig { num_expert: m, ..base.clone() }).total;
        println!("M={m}  total {total:>8}  extra {:>6}", total - one);
    }
}
