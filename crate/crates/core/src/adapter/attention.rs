use ndarray::{Array2, LinalgScalar};
use num_traits::Float;

/// In-place numerically stable softmax of every row. The normalizer is
/// accumulated in f64 so long f32 rows still sum to one.
pub fn softmax_rows<A: Float>(s: &mut Array2<A>) {
    for mut row in s.rows_mut() {
        let max = row.iter().fold(A::neg_infinity(), |m, &v| m.max(v));
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += v.to_f64().unwrap_or(0.0);
        }
        let sum = A::from(sum).unwrap();
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// `softmax((L wq)(L wk)^T / sqrt(d)) (G wv)` for row-major token matrices.
pub fn attention_core<A: Float + LinalgScalar>(
    l: &Array2<A>,
    g: &Array2<A>,
    wq: &Array2<A>,
    wk: &Array2<A>,
    wv: &Array2<A>,
) -> Array2<A> {
    let q = l.dot(wq);
    let k = l.dot(wk);
    let v = g.dot(wv);
    let scale = A::from(wq.ncols()).unwrap().sqrt();
    let mut s = q.dot(&k.t()).mapv(|x| x / scale);
    softmax_rows(&mut s);
    s.dot(&v)
}
