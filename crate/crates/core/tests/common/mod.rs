//! Shared helpers for integration tests: manifest builders, random graphs and
//! brute-force reference implementations.
#![allow(dead_code)]

use std::fmt::Write as _;

use coprune::model_graph::LayerKind;
use coprune::{parse_manifest, LayerSpec, ModelGraph, WeightTensor};
use rand::seq::SliceRandom;
use rand::Rng;

/// One `[[layers]]` entry of a manifest under construction.
#[derive(Debug, Clone)]
pub struct L {
    pub name: String,
    pub kind: &'static str,
    pub kernel: u32,
    pub cin: u32,
    pub cout: u32,
    pub stride: u32,
    pub bias: bool,
    pub pool: Option<String>,
    pub successors: Vec<String>,
    pub skip_to: Option<String>,
    pub projection: bool,
}

impl L {
    pub fn new(name: &str, kind: &'static str, kernel: u32, cin: u32, cout: u32) -> Self {
        L {
            name: name.to_string(),
            kind,
            kernel,
            cin,
            cout,
            stride: 1,
            bias: false,
            pool: None,
            successors: Vec::new(),
            skip_to: None,
            projection: false,
        }
    }

    pub fn to(mut self, succ: &[&str]) -> Self {
        self.successors = succ.iter().map(|s| s.to_string()).collect();
        self
    }
}

pub fn manifest(input_spatial: u32, input_channels: u32, layers: &[L]) -> String {
    let mut out = format!("input_spatial = {input_spatial}\ninput_channels = {input_channels}\n");
    for l in layers {
        let _ = write!(
            out,
            "\n[[layers]]\nname = \"{}\"\nkind = \"{}\"\nkernel = {}\nin_channels = {}\nout_channels = {}\nstride = {}\n",
            l.name, l.kind, l.kernel, l.cin, l.cout, l.stride
        );
        if l.bias {
            out.push_str("bias = true\n");
        }
        if let Some(p) = &l.pool {
            let _ = writeln!(out, "pool = {p}");
        }
        let succ: Vec<String> = l.successors.iter().map(|s| format!("\"{s}\"")).collect();
        let _ = writeln!(out, "successors = [{}]", succ.join(", "));
        if let Some(t) = &l.skip_to {
            let _ = writeln!(out, "skip_to = \"{t}\"");
        }
        if l.projection {
            out.push_str("projection = true\n");
        }
    }
    out
}

pub fn build(input_spatial: u32, input_channels: u32, layers: &[L]) -> ModelGraph {
    let text = manifest(input_spatial, input_channels, layers);
    parse_manifest(&text).unwrap_or_else(|e| panic!("{e}\n{text}"))
}

/// Grows a random, valid chain with residual, depthwise and flatten structure.
struct Builder {
    layers: Vec<L>,
    width: u32,
    spatial: u32,
    /// Index of the layer currently feeding the next one.
    tail: Option<usize>,
}

impl Builder {
    fn push(&mut self, mut l: L) -> usize {
        l.cin = if l.kind == "fc" && self.spatial > 1 && self.tail.is_some_and(|t| self.layers[t].kind != "fc") {
            self.width * self.spatial * self.spatial
        } else {
            self.width
        };
        if let Some(t) = self.tail {
            self.layers[t].successors.push(l.name.clone());
        }
        if l.stride == 2 {
            self.spatial = self.spatial.div_ceil(2);
        }
        if l.kind == "fc" {
            self.spatial = 1;
        }
        self.width = l.cout;
        self.layers.push(l);
        self.tail = Some(self.layers.len() - 1);
        self.layers.len() - 1
    }

    fn name(&self, stem: &str) -> String {
        format!("{stem}{}", self.layers.len())
    }

    fn tail_is_plain(&self) -> bool {
        self.tail.is_some_and(|t| {
            let l = &self.layers[t];
            l.pool.is_none() && l.skip_to.is_none() && l.kind != "fc"
        })
    }
}

/// A random graph mixing conv, batch norm, residual, depthwise/pointwise, pooling
/// and flatten edges. Widths stay small so brute-force checks are cheap.
pub fn random_graph(rng: &mut impl Rng) -> ModelGraph {
    let spatial = *[4u32, 6, 8].choose(rng).unwrap();
    let channels = rng.gen_range(1..=3);
    let mut b = Builder {
        layers: Vec::new(),
        width: channels,
        spatial,
        tail: None,
    };
    let blocks = rng.gen_range(1..=4);
    for i in 0..blocks {
        let choice = if i == 0 { 0 } else { rng.gen_range(0..4) };
        match choice {
            1 if b.tail_is_plain() => {
                let w = b.width;
                let source = b.tail.unwrap();
                let a = L::new(&b.name("ra"), "conv", 3, w, w);
                b.push(a);
                let c = L::new(&b.name("rb"), "conv", 3, w, w);
                let target = c.name.clone();
                b.push(c);
                b.layers[source].skip_to = Some(target);
            }
            2 if b.tail_is_plain() => {
                let source = b.tail.unwrap();
                let w2 = rng.gen_range(2..=6);
                let stride = if b.spatial >= 4 && rng.gen_bool(0.5) { 2 } else { 1 };
                let w = b.width;
                let mut a = L::new(&b.name("pa"), "conv", 3, w, w2);
                a.stride = stride;
                b.push(a);
                let c = L::new(&b.name("pb"), "conv", 3, w2, w2);
                let target = c.name.clone();
                b.push(c);
                let mut p = L::new(&format!("proj_{target}"), "conv", 1, w, w2);
                p.stride = stride;
                p.skip_to = Some(target);
                p.projection = true;
                // The projection reads the block input and precedes the target.
                b.layers[source].successors.insert(0, p.name.clone());
                let at = b.layers.len() - 1;
                b.layers.insert(at, p);
                b.tail = Some(b.layers.len() - 1);
            }
            3 => {
                let w = b.width;
                let mut dw = L::new(&b.name("dw"), "depthwise_conv", 3, w, w);
                if b.spatial >= 4 && rng.gen_bool(0.3) {
                    dw.stride = 2;
                }
                b.push(dw);
                let cout = rng.gen_range(2..=6);
                let mut pw = L::new(&b.name("pw"), "pointwise_conv", 1, w, cout);
                pw.bias = rng.gen_bool(0.3);
                b.push(pw);
            }
            _ => {
                let cout = rng.gen_range(2..=6);
                let mut c = L::new(&b.name("c"), "conv", *[1u32, 3].choose(rng).unwrap(), b.width, cout);
                if b.spatial >= 4 && rng.gen_bool(0.25) {
                    c.stride = 2;
                }
                c.bias = rng.gen_bool(0.3);
                b.push(c);
                if rng.gen_bool(0.5) {
                    let bn = L::new(&b.name("bn"), "batch_norm", 1, cout, cout);
                    b.push(bn);
                }
                if b.spatial >= 4 && rng.gen_bool(0.3) {
                    let t = b.tail.unwrap();
                    b.layers[t].pool = Some("2".into());
                    b.spatial /= 2;
                }
            }
        }
    }
    if rng.gen_bool(0.5) {
        let t = b.tail.unwrap();
        if b.layers[t].pool.is_none() && rng.gen_bool(0.5) {
            b.layers[t].pool = Some("\"global\"".into());
            b.spatial = 1;
        }
        let hidden = rng.gen_range(2..=6);
        let mut fc = L::new(&b.name("fc"), "fc", 1, 0, hidden);
        fc.bias = rng.gen_bool(0.5);
        b.push(fc);
    }
    let classes = rng.gen_range(2..=4);
    let mut head = L::new(&b.name("head"), "fc", 1, 0, classes);
    head.bias = rng.gen_bool(0.5);
    b.push(head);
    build(spatial, channels, &b.layers)
}

/// Pearson coefficient from the covariance definition, `0` for constant vectors.
pub fn pearson_ref(u: &[f64], v: &[f64]) -> f64 {
    let n = u.len() as f64;
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vu = 0.0;
    let mut vv = 0.0;
    for i in 0..u.len() {
        cov += (u[i] - mu) * (v[i] - mv);
        vu += (u[i] - mu).powi(2);
        vv += (v[i] - mv).powi(2);
    }
    if vu == 0.0 || vv == 0.0 {
        return 0.0;
    }
    cov / (vu.sqrt() * vv.sqrt())
}

/// `[K, K, M, N]` (or `[M, N]`) similarity of input maps `a` and `b` by triple loop.
pub fn similarity_ref(t: &WeightTensor, a: usize, b: usize) -> f64 {
    let (k2, m, n) = match t.dims[..] {
        [m, n] => (1, m, n),
        [k, _, m, n] => (k * k, m, n),
        _ => panic!("bad dims"),
    };
    let mut total = 0.0;
    for p in 0..k2 {
        let row = |f: usize| -> Vec<f64> { (0..n).map(|j| t.data[(p * m + f) * n + j] as f64).collect() };
        total += pearson_ref(&row(a), &row(b)).abs();
    }
    total / k2 as f64
}

/// Max-normalized top-k importance by sorting, straight from the definitions.
pub fn importance_ref(t: &WeightTensor, k: usize) -> Vec<f64> {
    let m = t.dims[t.dims.len() - 2];
    let mut sim = vec![vec![0.0; m]; m];
    let mut max = 0.0f64;
    for a in 0..m {
        for b in 0..m {
            if a != b {
                sim[a][b] = similarity_ref(t, a, b);
                max = max.max(sim[a][b]);
            }
        }
    }
    (0..m)
        .map(|a| {
            let mut peers: Vec<f64> = (0..m)
                .filter(|&b| b != a)
                .map(|b| if max > 0.0 { sim[a][b] / max } else { sim[a][b] })
                .collect();
            peers.sort_by(|x, y| y.partial_cmp(x).unwrap());
            let kk = k.min(m - 1);
            1.0 - peers[..kk].iter().sum::<f64>() / kk as f64
        })
        .collect()
}

/// Parameter count of a layer from first principles.
pub fn params_ref(l: &LayerSpec) -> u64 {
    let (k, m, n) = (l.kernel as u64, l.in_channels as u64, l.out_channels as u64);
    let bias = if l.bias { n } else { 0 };
    match l.kind {
        LayerKind::Conv | LayerKind::PointwiseConv | LayerKind::Fc => k * k * m * n + bias,
        LayerKind::DepthwiseConv => k * k * m + bias,
        LayerKind::BatchNorm => 4 * n,
    }
}

/// FLOPs of a layer from first principles (output spatial convention).
pub fn flops_ref(l: &LayerSpec) -> u64 {
    let (k, m, n, o) = (l.kernel as u64, l.in_channels as u64, l.out_channels as u64, l.out_spatial as u64);
    match l.kind {
        LayerKind::Conv | LayerKind::PointwiseConv => 2 * o * o * k * k * m * n,
        LayerKind::Fc => 2 * m * n,
        LayerKind::DepthwiseConv => 2 * o * o * k * k * m,
        LayerKind::BatchNorm => 0,
    }
}

pub fn totals_ref(g: &ModelGraph) -> (u64, u64) {
    g.layers().iter().fold((0, 0), |(p, f), l| (p + params_ref(l), f + flops_ref(l)))
}

pub fn tensor(name: &str, dims: Vec<usize>, rng: &mut impl Rng) -> WeightTensor {
    let n = dims.iter().product();
    WeightTensor::new(name, dims, (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Random index sets for some prunable groups, each leaving at least one survivor.
pub fn random_removals(g: &ModelGraph, rng: &mut impl Rng) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for group in g.groups() {
        if !group.prunable || rng.gen_bool(0.4) {
            continue;
        }
        let width = group.width as usize;
        let n = rng.gen_range(1..width);
        let mut idx: Vec<usize> = (0..width).collect();
        idx.shuffle(rng);
        idx.truncate(n);
        idx.sort_unstable();
        out.push((group.representative().to_string(), idx));
    }
    out
}

pub fn removal_refs(r: &[(String, Vec<usize>)]) -> Vec<(&str, &[usize])> {
    r.iter().map(|(n, i)| (n.as_str(), i.as_slice())).collect()
}
