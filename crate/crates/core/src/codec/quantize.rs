//! Nearest-codebook-entry search.

use iclp_substrate::Float;

/// Index of the row of `codebook` (`[K, d]`, row-major) nearest to `x` in
/// Euclidean distance, and the squared distance. Ties go to the lowest
/// index. Candidates are abandoned as soon as their partial sum reaches the
/// best distance so far, which never changes the result.
pub fn nearest<F: Float>(codebook: &[F], d: usize, x: &[F]) -> (usize, F) {
    debug_assert_eq!(x.len(), d);
    let mut best = 0;
    let mut best_dist = F::infinity();
    for (k, row) in codebook.chunks_exact(d).enumerate() {
        let mut acc = F::zero();
        let mut pruned = false;
        for (chunk_r, chunk_x) in row.chunks(16).zip(x.chunks(16)) {
            for (&r, &v) in chunk_r.iter().zip(chunk_x) {
                let diff = r - v;
                acc += diff * diff;
            }
            if acc >= best_dist {
                pruned = true;
                break;
            }
        }
        if !pruned && acc < best_dist {
            best = k;
            best_dist = acc;
        }
    }
    (best, best_dist)
}

/// Nearest index for every row of `slots` (`[n, d]`).
pub fn quantize_rows<F: Float>(codebook: &[F], slots: &[F], d: usize) -> Vec<usize> {
    slots.chunks_exact(d).map(|x| nearest(codebook, d, x).0).collect()
}
