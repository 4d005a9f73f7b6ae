//! Regenerates `data/bundled.svm`:
//!
//! ```text
//! cargo run --example gen_bundled > data/bundled.svm
//! ```

use stosqp::logreg::synthetic_dataset;

fn main() {
    let ds = synthetic_dataset(40, 200, 1.0, 0.5, 3.0, 7);
    print!("# synthetic: 40 features, 200 samples, scale 1, density 0.5, signal 3, seed 7\n{}", ds.to_libsvm());
}
