//! Convolutional actor-critic with a masked multi-discrete policy head.

use gridrts::{component_widths, ActionMask, ActionVector, NUM_COMPONENTS, NUM_PLANES};
use numcore::{orthogonal_init, Graph, Scalar, Segments, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Parameter names in storage order.
pub const PARAM_NAMES: [&str; 10] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "fc.weight",
    "fc.bias",
    "policy.weight",
    "policy.bias",
    "value.weight",
    "value.bias",
];

const CONV1_FILTERS: usize = 16;
const CONV2_FILTERS: usize = 32;
const HIDDEN: usize = 128;

/// Logits emitted by the policy head for an `h x w` map.
pub fn head_width(height: usize, width: usize) -> usize {
    2 * height * width + 36
}

/// Logits actually consumed by the eight action components.
pub fn used_logits(height: usize, width: usize) -> usize {
    component_widths(height, width).iter().sum()
}

fn conv_out(n: usize, k: usize, stride: usize) -> usize {
    (n - k) / stride + 1
}

/// Map dimensions and head layout, stored next to checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub height: usize,
    pub width: usize,
    pub planes: usize,
    pub head_width: usize,
    pub slice_widths: Vec<usize>,
}

impl NetSpec {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            planes: NUM_PLANES,
            head_width: head_width(height, width),
            slice_widths: component_widths(height, width).to_vec(),
        }
    }

    pub fn flat_features(&self) -> usize {
        let h = conv_out(conv_out(self.height, 3, 2), 2, 1);
        let w = conv_out(conv_out(self.width, 3, 2), 2, 1);
        h * w * CONV2_FILTERS
    }

    pub fn obs_len(&self) -> usize {
        self.height * self.width * self.planes
    }

    pub fn segments(&self) -> Segments {
        Segments::from_widths(&self.slice_widths)
    }

    pub fn mask_len(&self) -> usize {
        self.slice_widths.iter().sum()
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let f = self.flat_features();
        vec![
            vec![3, 3, self.planes, CONV1_FILTERS],
            vec![CONV1_FILTERS],
            vec![2, 2, CONV1_FILTERS, CONV2_FILTERS],
            vec![CONV2_FILTERS],
            vec![f, HIDDEN],
            vec![HIDDEN],
            vec![HIDDEN, self.head_width],
            vec![self.head_width],
            vec![HIDDEN, 1],
            vec![1],
        ]
    }
}

/// Network parameters in [`PARAM_NAMES`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet<T> {
    pub spec: NetSpec,
    pub params: Vec<Tensor<T>>,
}

/// Graph handles produced by [`PolicyNet::forward`].
#[derive(Clone, Debug)]
pub struct Forward {
    pub params: Vec<Var>,
    /// `(n, head_width)`.
    pub logits: Var,
    /// `(n, 1)`.
    pub value: Var,
}

impl<T: Scalar> PolicyNet<T> {
    /// Orthogonal weights with gain 1, zero biases.
    pub fn new<R: Rng + ?Sized>(spec: NetSpec, rng: &mut R) -> Self {
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|shape| if shape.len() == 1 { Tensor::zeros(shape) } else { orthogonal_init(&shape, 1.0, rng) })
            .collect();
        Self { spec, params }
    }

    pub fn from_params(spec: NetSpec, params: Vec<Tensor<T>>) -> Self {
        let shapes = spec.param_shapes();
        assert_eq!(params.len(), shapes.len(), "parameter count");
        for ((p, s), name) in params.iter().zip(&shapes).zip(PARAM_NAMES) {
            assert_eq!(p.shape(), s.as_slice(), "shape of {name}");
        }
        Self { spec, params }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> PolicyNet<U> {
        PolicyNet { spec: self.spec.clone(), params: self.params.iter().map(Tensor::cast).collect() }
    }

    /// Adds the network to `g` on a batch of `(n, h, w, planes)` observations.
    ///
    /// With `trainable` false the parameters enter as constants.
    pub fn forward(&self, g: &mut Graph<T>, obs: Tensor<T>, trainable: bool) -> Forward {
        let n = obs.len() / self.spec.obs_len();
        assert_eq!(n * self.spec.obs_len(), obs.len(), "observation batch length");
        let obs = obs.reshape(vec![n, self.spec.height, self.spec.width, self.spec.planes]);
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| if trainable { g.param(p.clone()) } else { g.constant(p.clone()) })
            .collect();
        let x = g.constant(obs);
        let x = g.conv2d(x, params[0], 2);
        let x = g.add_bias(x, params[1]);
        let x = g.relu(x);
        let x = g.conv2d(x, params[2], 1);
        let x = g.add_bias(x, params[3]);
        let x = g.relu(x);
        let x = g.reshape(x, &[n, self.spec.flat_features()]);
        let x = g.linear(x, params[4], params[5]);
        let hidden = g.relu(x);
        let logits = g.linear(hidden, params[6], params[7]);
        let value = g.linear(hidden, params[8], params[9]);
        Forward { params, logits, value }
    }

    /// Per-row masked log-probabilities `(n, used_logits)` and values.
    pub fn evaluate(&self, obs: Tensor<T>, masks: &[bool]) -> (Vec<MaskedDistribution<T>>, Vec<T>) {
        let mut g = Graph::new();
        let out = self.forward(&mut g, obs, false);
        let logp = g.masked_log_softmax(out.logits, &self.spec.segments(), masks.to_vec());
        let width = self.spec.mask_len();
        let dists = g
            .value(logp)
            .data()
            .chunks(width)
            .zip(masks.chunks(width))
            .map(|(lp, m)| MaskedDistribution::new(self.spec.slice_widths.clone(), lp.to_vec(), m.to_vec()))
            .collect();
        (dists, g.value(out.value).data().to_vec())
    }

    /// Value estimates only.
    pub fn values(&self, obs: Tensor<T>) -> Vec<T> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, obs, false);
        g.value(out.value).data().to_vec()
    }
}

/// Joint log-probability of `actions` (`n` rows of 8 indices) under the
/// masked log-probabilities `logp` of shape `(n, used_logits)`.
pub fn joint_log_prob<T: Scalar>(g: &mut Graph<T>, logp: Var, spec: &NetSpec, actions: &[[usize; NUM_COMPONENTS]]) -> Var {
    let offsets = component_offsets(&spec.slice_widths);
    let offsets = &offsets;
    let index = actions.iter().flat_map(|a| (0..NUM_COMPONENTS).map(move |c| offsets[c] + a[c])).collect();
    let chosen = g.gather_cols(logp, index);
    g.sum_rows(chosen)
}

/// Sum of component entropies per row, `(n)`.
pub fn entropy_rows<T: Scalar>(g: &mut Graph<T>, logp: Var) -> Var {
    let p = g.exp(logp);
    let plogp = g.mul(p, logp);
    let s = g.sum_rows(plogp);
    g.neg(s)
}

fn component_offsets(widths: &[usize]) -> Vec<usize> {
    widths
        .iter()
        .scan(0, |acc, &w| {
            let o = *acc;
            *acc += w;
            Some(o)
        })
        .collect()
}

/// Log-probability reported for actions outside the mask.
pub const INVALID_LOG_PROB: f64 = f64::NEG_INFINITY;

/// Independent categorical components over one observation.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedDistribution<T> {
    widths: Vec<usize>,
    log_probs: Vec<T>,
    valid: Vec<bool>,
}

impl<T: Scalar> MaskedDistribution<T> {
    pub fn new(widths: Vec<usize>, log_probs: Vec<T>, valid: Vec<bool>) -> Self {
        let total: usize = widths.iter().sum();
        assert_eq!(log_probs.len(), total, "log-prob length");
        assert_eq!(valid.len(), total, "mask length");
        Self { widths, log_probs, valid }
    }

    /// Builds the distribution directly from raw logits of one row.
    pub fn from_logits(logits: &[T], mask: &ActionMask) -> Self {
        let spec_widths = mask.widths().to_vec();
        let total: usize = spec_widths.iter().sum();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, logits.len()], logits.to_vec()));
        assert!(logits.len() >= total, "fewer logits than mask entries");
        let lp = g.masked_log_softmax(x, &Segments::from_widths(&spec_widths), mask.flat());
        Self::new(spec_widths, g.value(lp).data().to_vec(), mask.flat())
    }

    pub fn num_components(&self) -> usize {
        self.widths.len()
    }

    fn range(&self, c: usize) -> std::ops::Range<usize> {
        let start: usize = self.widths[..c].iter().sum();
        start..start + self.widths[c]
    }

    /// Probabilities of component `c`; masked entries are exactly 0.
    pub fn probs(&self, c: usize) -> Vec<f64> {
        self.range(c)
            .map(|i| if self.valid[i] { self.log_probs[i].as_f64().exp() } else { 0.0 })
            .collect()
    }

    pub fn log_probs(&self) -> &[T] {
        &self.log_probs
    }

    pub fn is_valid(&self, action: &ActionVector) -> bool {
        action.to_array().iter().enumerate().all(|(c, &a)| a < self.widths[c] && self.valid[self.range(c).start + a])
    }

    /// Sum of the chosen entries' log-probabilities, in component order.
    pub fn log_prob(&self, action: &ActionVector) -> T {
        if !self.is_valid(action) {
            return T::cast(INVALID_LOG_PROB);
        }
        action.to_array().iter().enumerate().map(|(c, &a)| self.log_probs[self.range(c).start + a]).sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (ActionVector, T) {
        let mut a = [0usize; NUM_COMPONENTS];
        for (c, slot) in a.iter_mut().enumerate().take(self.widths.len()) {
            let probs = self.probs(c);
            let total: f64 = probs.iter().sum();
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, p) in probs.iter().enumerate() {
                if *p > 0.0 {
                    pick = Some(i);
                    acc += p;
                    if u < acc {
                        break;
                    }
                }
            }
            *slot = pick.unwrap_or_else(|| self.range(c).position(|i| self.valid[i]).expect("component has a valid entry"));
        }
        let action = ActionVector::from_array(a);
        (action, self.log_prob(&action))
    }

    /// Sum of the components' Shannon entropies over valid entries.
    pub fn entropy(&self) -> f64 {
        (0..self.widths.len())
            .map(|c| -self.probs(c).iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
            .sum()
    }
}

/// JSON stored alongside a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub spec: NetSpec,
    pub param_names: Vec<String>,
    pub policies: Vec<String>,
}
