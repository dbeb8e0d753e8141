//! Shared test-side oracles, independent of the tape implementation.

use csg_core::fusion::Attention;
use csg_core::tensor::Tensor;

pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn from_tensor(t: &Tensor<f64>) -> Mat {
        Mat {
            rows: t.rows(),
            cols: t.cols(),
            data: t.data().to_vec(),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

pub fn mat_mul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows);
    let mut out = Mat {
        rows: a.rows,
        cols: b.cols,
        data: vec![0.0; a.rows * b.cols],
    };
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut s = 0.0;
            for k in 0..a.cols {
                s += a.at(i, k) * b.at(k, j);
            }
            out.data[i * b.cols + j] = s;
        }
    }
    out
}

/// Multi-head cross-attention from first principles: per head, q/k/v
/// projections, scaled scores, row softmax, weighted values; heads
/// concatenated then sent through the output matrix. Never touches the
/// tape, so it can judge it.
pub fn oracle_align(
    audio: &Tensor<f64>,
    chord: &Tensor<f64>,
    attn: &Attention<Tensor<f64>>,
) -> Vec<f64> {
    let fa = audio.rows();
    let fc = chord.rows();
    let dim = audio.cols();
    let heads = attn.heads();
    let head_dim = dim / heads;
    let a = Mat::from_tensor(audio);
    let c = Mat::from_tensor(chord);

    let mut concat = vec![0.0; fa * dim];
    for h in 0..heads {
        let q = mat_mul(&a, &Mat::from_tensor(&attn.wq[h]));
        let k = mat_mul(&c, &Mat::from_tensor(&attn.wk[h]));
        let v = mat_mul(&c, &Mat::from_tensor(&attn.wv[h]));
        let scale = 1.0 / (head_dim as f64).sqrt();
        for t in 0..fa {
            let mut scores = vec![0.0; fc];
            for (u, s) in scores.iter_mut().enumerate() {
                let mut dot = 0.0;
                for d in 0..head_dim {
                    dot += q.at(t, d) * k.at(u, d);
                }
                *s = dot * scale;
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for d in 0..head_dim {
                let mut ctx = 0.0;
                for (u, &e) in exps.iter().enumerate() {
                    ctx += e / denom * v.at(u, d);
                }
                concat[t * dim + h * head_dim + d] = ctx;
            }
        }
    }
    let concat_mat = Mat {
        rows: fa,
        cols: dim,
        data: concat,
    };
    mat_mul(&concat_mat, &Mat::from_tensor(&attn.wo)).data
}
