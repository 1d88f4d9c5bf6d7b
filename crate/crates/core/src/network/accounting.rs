//! Static parameter and FLOP accounting.
//!
//! FLOP convention: one multiply and one add are two FLOPs, a comparison or
//! a max is one. Data movement (gather, concat, reshape, scatter of pooled
//! gradients) costs nothing. Per operation:
//!
//! | op                          | forward          | backward                           |
//! |-----------------------------|------------------|------------------------------------|
//! | `[m,k]·[k,n]` matmul        | `m·n·(2k-1)`     | `m·k·(2n-1) + k·n·(2m-1)`          |
//! | bias over `[m,n]`           | `m·n`            | `(m-1)·n`                          |
//! | ReLU over `[m,n]`           | `m·n`            | `m·n`                              |
//! | max over groups of `L`      | `(L-1)` per group| `0`                                |
//! | localization `q - p`        | `3` per neighbor | `0`                                |
//! | neighbor search             | `8` per pair     | `0`                                |
//!
//! A neighbor-search pair costs three differences, three squares and two
//! sums. Conv1d is counted as its im2col matmul. The loss is not counted.
//! Training cost is forward plus backward for one step.

use serde::Serialize;

use super::{Network, Task};
use crate::autodiff::Real;
use crate::shellconv::ShellConvParams;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub total: usize,
    /// `(layer, scalars)` in registration order.
    pub layers: Vec<(String, usize)>,
}

/// Exact trainable scalar count, grouped by layer (`encoder.0`, `head.1`, ...).
pub fn count_parameters<T: Real>(net: &Network<T>) -> ParamReport {
    let mut layers: Vec<(String, usize)> = Vec::new();
    for (name, value) in net.params().iter() {
        let group: String = name.split('.').take(2).collect::<Vec<_>>().join(".");
        match layers.last_mut() {
            Some((g, n)) if *g == group => *n += value.len(),
            _ => layers.push((group, value.len())),
        }
    }
    ParamReport {
        total: layers.iter().map(|l| l.1).sum(),
        layers,
    }
}

pub fn matmul_flops(m: usize, k: usize, n: usize) -> u64 {
    (m * n) as u64 * (2 * k as u64).saturating_sub(1)
}

pub fn matmul_backward_flops(m: usize, k: usize, n: usize) -> u64 {
    matmul_flops(m, n, k) + matmul_flops(k, m, n)
}

/// Valid 1-d convolution of a `[len, cin]` signal with a `[width, cin, cout]`
/// kernel.
pub fn conv1d_flops(len: usize, cin: usize, cout: usize, width: usize, stride: usize) -> u64 {
    if len < width || stride == 0 {
        return 0;
    }
    let out_len = (len - width) / stride + 1;
    matmul_flops(out_len, width * cin, cout)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopItem {
    pub name: String,
    pub forward: u64,
    pub backward: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopReport {
    pub input_size: usize,
    pub batch: usize,
    pub inference: u64,
    pub training: u64,
    pub items: Vec<FlopItem>,
}

#[derive(Default)]
struct Tally {
    forward: u64,
    backward: u64,
}

impl Tally {
    fn matmul(&mut self, m: usize, k: usize, n: usize) {
        self.forward += matmul_flops(m, k, n);
        self.backward += matmul_backward_flops(m, k, n);
    }

    fn bias(&mut self, m: usize, n: usize) {
        self.forward += (m * n) as u64;
        self.backward += (m.saturating_sub(1) * n) as u64;
    }

    fn relu(&mut self, m: usize, n: usize) {
        self.forward += (m * n) as u64;
        self.backward += (m * n) as u64;
    }

    fn linear(&mut self, m: usize, k: usize, n: usize, relu: bool) {
        self.matmul(m, k, n);
        self.bias(m, n);
        if relu {
            self.relu(m, n);
        }
    }
}

/// One shell convolution over `centers` representatives that search
/// `candidates` source points.
fn shell_conv_tally(p: &ShellConvParams, centers: usize, candidates: usize) -> Tally {
    let mut t = Tally::default();
    let k = p.plan.neighbors();
    let rows = centers * k;
    t.forward += 8 * (centers * candidates) as u64;
    t.forward += 3 * rows as u64;
    for l in &p.lift {
        t.linear(rows, l.inputs, l.outputs, true);
    }
    let c_mid = p.mid_width();
    let groups = centers * p.plan.num_shells;
    t.forward += ((rows - groups) * c_mid) as u64;
    t.matmul(centers, p.plan.num_shells * c_mid, p.plan.out_channels);
    t.bias(centers, p.plan.out_channels);
    t.relu(centers, p.plan.out_channels);
    t
}

/// FLOPs of one forward pass (inference) and one forward plus backward pass
/// (training) over `batch` clouds of `input_size` points.
pub fn count_flops<T: Real>(net: &Network<T>, input_size: usize, batch: usize) -> FlopReport {
    let cfg = net.config();
    let mut items = Vec::new();
    let mut push = |name: String, t: Tally| {
        items.push(FlopItem {
            name,
            forward: t.forward * batch as u64,
            backward: t.backward * batch as u64,
        })
    };

    let mut sizes = vec![input_size];
    for (i, (p, l)) in net.encoder().iter().zip(&cfg.layers).enumerate() {
        push(format!("encoder.{i}"), shell_conv_tally(p, l.points, sizes[i]));
        sizes.push(l.points);
    }
    let last = *sizes.last().unwrap_or(&input_size);

    let rows = match cfg.task {
        Task::Classification => {
            let c = cfg.layers.last().map_or(0, |l| l.channels);
            let mut t = Tally::default();
            t.forward += (last.saturating_sub(1) * c) as u64;
            push("pool".into(), t);
            1
        }
        Task::Segmentation => {
            let levels = net.decoder().len();
            for (j, p) in net.decoder().iter().enumerate() {
                let source = levels - 1 - j;
                // sizes[source] is the center level, sizes[source + 1] the source
                push(
                    format!("decoder.{j}"),
                    shell_conv_tally(p, sizes[source], sizes[source + 1]),
                );
            }
            input_size
        }
    };
    let last_head = net.head().len().saturating_sub(1);
    for (i, l) in net.head().iter().enumerate() {
        let mut t = Tally::default();
        t.linear(rows, l.inputs, l.outputs, i < last_head);
        push(format!("head.{i}"), t);
    }

    let inference = items.iter().map(|i| i.forward).sum();
    let backward: u64 = items.iter().map(|i| i.backward).sum();
    FlopReport {
        input_size,
        batch,
        inference,
        training: inference + backward,
        items,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_classifier, build_segmenter, NetworkConfig};

    #[test]
    fn matmul_convention() {
        for k in 1..6 {
            assert_eq!(matmul_flops(k, k, k), (2 * k * k * k - k * k) as u64);
        }
        assert_eq!(matmul_flops(3, 0, 2), 0);
    }

    #[test]
    fn conv1d_against_loop_count() {
        for &(len, cin, cout, width, stride) in
            &[(5, 2, 3, 2, 1), (7, 3, 2, 3, 2), (4, 1, 1, 4, 1), (9, 2, 4, 1, 3)]
        {
            // direct loops: each output is a sum of width*cin products
            let mut count = 0u64;
            let mut start = 0;
            while start + width <= len {
                for _ in 0..cout {
                    let mut terms = 0u64;
                    for _ in 0..width {
                        for _ in 0..cin {
                            count += 1;
                            terms += 1;
                        }
                    }
                    count += terms - 1;
                }
                start += stride;
            }
            assert_eq!(conv1d_flops(len, cin, cout, width, stride), count);
        }
    }

    #[test]
    fn linear_layer_params() {
        let mut cfg = NetworkConfig::classification();
        cfg.head_widths = vec![];
        let net = build_classifier::<f32>(&cfg).unwrap();
        let head = count_parameters(&net).layers.last().cloned().unwrap();
        assert_eq!(head, ("head.0".to_string(), 512 * 40 + 40));
    }

    #[test]
    fn default_classifier_param_total() {
        let net = build_classifier::<f32>(&NetworkConfig::classification()).unwrap();
        let r = count_parameters(&net);
        assert_eq!(r.total, net.params().num_scalars());
        assert_eq!(r.layers.len(), 6);
        assert!((200_000..1_000_000).contains(&r.total));
    }

    #[test]
    fn flops_cover_every_layer() {
        let net = build_segmenter::<f32>(&NetworkConfig::segmentation()).unwrap();
        let r = count_flops(&net, 1024, 1);
        let names: Vec<_> = r.items.iter().map(|i| i.name.as_str()).collect();
        assert_eq!(
            names,
            ["encoder.0", "encoder.1", "encoder.2", "decoder.0", "decoder.1", "decoder.2", "head.0"]
        );
        assert!(r.training > 2 * r.inference);
        assert_eq!(count_flops(&net, 1024, 4).inference, 4 * r.inference);
    }
}
