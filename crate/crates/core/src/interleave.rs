//! Query-token interleaving layout.
//!
//! Frames are grouped into blocks of `w`; one query slot follows each block.
//! With `T` frames (`T` divisible by `w`) and `Tq = T / w` blocks, the
//! interleaved sequence has `T + Tq` rows and the query for block `i` sits at
//! index `(i + 1) * (w + 1) - 1`. These index maps are the bitstream layout
//! contract: an encoder and decoder only interoperate if they agree on them.

use crate::autodiff::Tensor;

/// Frame count after right-padding to a multiple of `w`.
pub fn padded_len(t: usize, w: usize) -> usize {
    assert!(w >= 1, "window must be >= 1");
    t.div_ceil(w) * w
}

/// Length of the interleaved sequence for `t` frames (`t % w == 0`).
pub fn interleaved_len(t: usize, w: usize) -> usize {
    assert_eq!(t % w, 0, "frame count {t} not divisible by window {w}");
    t + t / w
}

/// Query slot indices within an interleaved sequence of `t_q` blocks.
pub fn query_positions(t_q: usize, w: usize) -> Vec<usize> {
    (0..t_q).map(|i| (i + 1) * (w + 1) - 1).collect()
}

/// Frame slot indices (the complement of the query slots), in frame order.
/// Interleaved position `p` holds frame `(p / (w+1)) * w + p % (w+1)`.
pub fn frame_positions(t: usize, w: usize) -> Vec<usize> {
    let total = interleaved_len(t, w);
    (0..total).filter(|p| p % (w + 1) != w).collect()
}

/// Right-pad a `(T, d)` frame tensor to a multiple of `w` by repeating the
/// last frame. Returns the padded tensor and the original frame count.
pub fn pad_frames(frames: &Tensor, w: usize) -> (Tensor, usize) {
    let shape = frames.shape();
    assert_eq!(shape.len(), 2, "pad_frames: rank 2 input");
    let t = shape[0];
    assert!(t >= 1, "pad_frames: empty frame sequence");
    let target = padded_len(t, w);
    if target == t {
        return (frames.clone(), t);
    }
    let mut idx: Vec<usize> = (0..t).collect();
    idx.extend(std::iter::repeat(t - 1).take(target - t));
    (frames.gather_rows(&idx), t)
}

/// Interleave a learned query token after every `w` frames.
/// `frames` is `(T, d)` with `T % w == 0`; `cls` is `(1, d)`.
pub fn encoder_interleave(frames: &Tensor, cls: &Tensor, w: usize) -> Tensor {
    let shape = frames.shape();
    assert_eq!(shape.len(), 2, "encoder_interleave: rank 2 frames");
    let (t, d) = (shape[0], shape[1]);
    assert_eq!(t % w, 0, "encoder_interleave: T={t} not divisible by w={w}");
    assert_eq!(cls.shape(), vec![1, d], "encoder_interleave: cls must be (1, d)");
    let t_q = t / w;
    let pool = Tensor::concat(0, &[frames.clone(), cls.repeat_rows(t_q)]);
    let total = t + t_q;
    let mut idx = Vec::with_capacity(total);
    for p in 0..total {
        let block = p / (w + 1);
        let off = p % (w + 1);
        if off == w {
            idx.push(t + block); // query slot
        } else {
            idx.push(block * w + off);
        }
    }
    pool.gather_rows(&idx)
}

/// Pull the `Tq` query rows out of an interleaved `(T + Tq, d)` sequence.
pub fn encoder_retrieve(seq: &Tensor, w: usize) -> Tensor {
    let rows = seq.shape()[0];
    assert_eq!(rows % (w + 1), 0, "encoder_retrieve: length {rows} not a multiple of w+1");
    let t_q = rows / (w + 1);
    seq.gather_rows(&query_positions(t_q, w))
}

/// Expand quantized query tokens for decoding: `w` copies of the mask token
/// before each query. `queries` is `(Tq, d)`; `mask` is `(1, d)`.
pub fn decoder_interleave(queries: &Tensor, mask: &Tensor, w: usize) -> Tensor {
    let shape = queries.shape();
    assert_eq!(shape.len(), 2, "decoder_interleave: rank 2 queries");
    let (t_q, d) = (shape[0], shape[1]);
    assert_eq!(mask.shape(), vec![1, d], "decoder_interleave: mask must be (1, d)");
    let pool = Tensor::concat(0, &[queries.clone(), mask.repeat_rows(1)]);
    let total = t_q * (w + 1);
    let mut idx = Vec::with_capacity(total);
    for p in 0..total {
        if p % (w + 1) == w {
            idx.push(p / (w + 1)); // query slot
        } else {
            idx.push(t_q); // shared mask row
        }
    }
    pool.gather_rows(&idx)
}

/// Pull the `Tq * w` frame rows out of a decoded `(Tq * (w+1), d)` sequence.
pub fn decoder_retrieve(seq: &Tensor, w: usize) -> Tensor {
    let rows = seq.shape()[0];
    assert_eq!(rows % (w + 1), 0, "decoder_retrieve: length {rows} not a multiple of w+1");
    let t = rows / (w + 1) * w;
    seq.gather_rows(&frame_positions(t, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn frames_of(t: usize, d: usize) -> Tensor {
        Tensor::constant(Array2::from_shape_fn((t, d), |(i, j)| (i * d + j) as f64).into_dyn())
    }

    fn row_const(d: usize, v: f64) -> Tensor {
        Tensor::constant(Array2::from_elem((1, d), v).into_dyn())
    }

    #[test]
    fn listing_layout_small_case() {
        // T=4, w=2: [f0 f1 q f2 f3 q] with queries at 2 and 5.
        let f = frames_of(4, 3);
        let cls = row_const(3, -1.0);
        let out = encoder_interleave(&f, &cls, 2).to_array();
        assert_eq!(out.shape(), &[6, 3]);
        assert_eq!(query_positions(2, 2), vec![2, 5]);
        for &q in &[2usize, 5] {
            for j in 0..3 {
                assert_eq!(out[[q, j]], -1.0);
            }
        }
        let fv = f.to_array();
        for (slot, frame) in [(0usize, 0usize), (1, 1), (3, 2), (4, 3)] {
            for j in 0..3 {
                assert_eq!(out[[slot, j]], fv[[frame, j]]);
            }
        }
    }

    #[test]
    fn round_trips_and_partition_modest_sweep() {
        for w in 1..=6usize {
            for t_q in 1..=7usize {
                let t = t_q * w;
                let f = frames_of(t, 2);
                let cls = row_const(2, 999.0);
                let inter = encoder_interleave(&f, &cls, w);
                assert_eq!(inter.shape()[0], interleaved_len(t, w));

                // Partition: query and frame position sets are disjoint and
                // exhaustive.
                let q = query_positions(t_q, w);
                let fr = frame_positions(t, w);
                let mut all: Vec<usize> = q.iter().chain(fr.iter()).copied().collect();
                all.sort_unstable();
                assert_eq!(all, (0..t + t_q).collect::<Vec<_>>());

                // Retrieval pulls the query token everywhere.
                let queries = encoder_retrieve(&inter, w).to_array();
                assert!(queries.iter().all(|&v| v == 999.0));

                // Frame rows keep their order and values.
                let back = inter.gather_rows(&fr).to_array();
                assert_eq!(back, f.to_array());

                // Decoder side: masks in frame slots, queries recoverable.
                let qs = frames_of(t_q, 2);
                let mask = row_const(2, -7.0);
                let dec = decoder_interleave(&qs, &mask, w);
                assert_eq!(dec.shape()[0], t_q * (w + 1));
                let masks = decoder_retrieve(&dec, w).to_array();
                assert!(masks.iter().all(|&v| v == -7.0));
                let qback = dec.gather_rows(&q).to_array();
                assert_eq!(qback, qs.to_array());
            }
        }
    }

    #[test]
    fn pad_repeats_last_frame() {
        let f = frames_of(5, 2);
        let (padded, orig) = pad_frames(&f, 3);
        assert_eq!(orig, 5);
        let p = padded.to_array();
        assert_eq!(p.shape(), &[6, 2]);
        assert_eq!(p[[5, 0]], p[[4, 0]]);
        assert_eq!(p[[5, 1]], p[[4, 1]]);
        // Already divisible: unchanged.
        let (same, o2) = pad_frames(&f, 5);
        assert_eq!(o2, 5);
        assert_eq!(same.to_array(), f.to_array());
    }

    #[test]
    fn pad_shorter_than_window() {
        let f = frames_of(2, 3);
        let (padded, orig) = pad_frames(&f, 8);
        assert_eq!(orig, 2);
        assert_eq!(padded.shape(), vec![8, 3]);
        let p = padded.to_array();
        for t in 2..8 {
            for j in 0..3 {
                assert_eq!(p[[t, j]], p[[1, j]]);
            }
        }
    }

    #[test]
    fn gradients_flow_through_layout() {
        // The layout is pure routing: gradients must land on the exact source
        // rows, and the shared cls/mask rows accumulate across blocks.
        let f = Tensor::leaf(Array2::from_shape_fn((4, 2), |(i, j)| (i + j) as f64).into_dyn());
        let cls = Tensor::leaf(Array2::from_elem((1, 2), 0.5).into_dyn());
        let out = encoder_interleave(&f, &cls, 2);
        out.sum_all().backward();
        let gf = f.grad().unwrap();
        assert!(gf.iter().all(|&v| v == 1.0));
        let gc = cls.grad().unwrap();
        assert!(gc.iter().all(|&v| v == 2.0)); // one per block
    }
}
