//! Masks for autoregressive conditioners.

/// Weight masks (row-major, `out x in` per layer) for a network with the
/// given hidden sizes. `order[i]` is the 1-based position of input `i` in the
/// autoregressive ordering. `outputs_per_dim` consecutive output units are
/// produced for each input dimension, all sharing that dimension's degree.
///
/// Hidden degrees cycle through `1..=dim-1` (all zero when `dim == 1`, which
/// leaves the outputs constant). An output with degree `k` only sees hidden
/// units of degree `< k`, so it never depends on inputs ordered at or after
/// its own.
pub fn made_masks(
    dim: usize,
    hidden_sizes: &[usize],
    order: &[usize],
    outputs_per_dim: usize,
) -> Vec<Vec<f64>> {
    assert!(dim >= 1, "dimension must be positive");
    assert_eq!(order.len(), dim, "order must list every input");
    let mut prev: Vec<usize> = order.to_vec();
    let mut masks = Vec::with_capacity(hidden_sizes.len() + 1);
    for &h in hidden_sizes {
        let deg: Vec<usize> = (0..h)
            .map(|k| if dim == 1 { 0 } else { 1 + k % (dim - 1) })
            .collect();
        let mut m = vec![0.0; h * prev.len()];
        for (r, &dr) in deg.iter().enumerate() {
            for (c, &dc) in prev.iter().enumerate() {
                if dr >= dc {
                    m[r * prev.len() + c] = 1.0;
                }
            }
        }
        masks.push(m);
        prev = deg;
    }
    let out_deg: Vec<usize> = order
        .iter()
        .flat_map(|&o| std::iter::repeat_n(o, outputs_per_dim))
        .collect();
    let mut m = vec![0.0; out_deg.len() * prev.len()];
    for (r, &dr) in out_deg.iter().enumerate() {
        for (c, &dc) in prev.iter().enumerate() {
            if dc < dr {
                m[r * prev.len() + c] = 1.0;
            }
        }
    }
    masks.push(m);
    masks
}

/// Output layout used by autoregressive layers: outputs are grouped by
/// parameter kind, so output `k * dim + i` is parameter `k` of dimension `i`.
/// Returns the masks reordered for that layout.
pub(crate) fn grouped_masks(dim: usize, hidden_sizes: &[usize], per_dim: usize) -> Vec<Vec<f64>> {
    let order: Vec<usize> = (1..=dim).collect();
    let mut masks = made_masks(dim, hidden_sizes, &order, per_dim);
    let last = masks.pop().expect("output mask");
    let cols = last.len() / (dim * per_dim);
    let mut regrouped = vec![0.0; last.len()];
    for i in 0..dim {
        for k in 0..per_dim {
            let src = (i * per_dim + k) * cols;
            let dst = (k * dim + i) * cols;
            regrouped[dst..dst + cols].copy_from_slice(&last[src..src + cols]);
        }
    }
    masks.push(regrouped);
    masks
}

#[cfg(test)]
mod tests {
    use super::*;

    fn connectivity(masks: &[Vec<f64>], dim: usize, hidden: &[usize], out: usize) -> Vec<bool> {
        // reach[o][i]: output o can see input i through some path.
        let mut reach: Vec<Vec<bool>> = (0..dim)
            .map(|i| (0..dim).map(|j| i == j).collect())
            .collect();
        let mut width = dim;
        for (l, m) in masks.iter().enumerate() {
            let rows = if l < hidden.len() { hidden[l] } else { out };
            let next: Vec<Vec<bool>> = (0..rows)
                .map(|r| {
                    (0..dim)
                        .map(|i| (0..width).any(|c| m[r * width + c] > 0.0 && reach[c][i]))
                        .collect()
                })
                .collect();
            reach = next;
            width = rows;
        }
        reach.into_iter().flatten().collect()
    }

    #[test]
    fn natural_order_is_strictly_lower() {
        let hidden = [7, 5];
        let masks = made_masks(4, &hidden, &[1, 2, 3, 4], 1);
        let reach = connectivity(&masks, 4, &hidden, 4);
        for o in 0..4 {
            for i in 0..4 {
                assert_eq!(reach[o * 4 + i], i < o, "output {o} input {i}");
            }
        }
    }

    #[test]
    fn single_dimension_sees_nothing() {
        let masks = made_masks(1, &[3], &[1], 2);
        let reach = connectivity(&masks, 1, &[3], 2);
        assert!(reach.iter().all(|&r| !r));
    }
}
