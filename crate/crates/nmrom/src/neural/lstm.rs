//! Stacked LSTM with full backpropagation through time.
//!
//! Gate layout follows the (input, forget, cell, output) convention with one
//! input-to-hidden matrix, one hidden-to-hidden matrix, and one bias per
//! layer. Initial hidden and cell states are zero.

use super::rng::DetRng;
use super::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct Lstm {
    pub input_dim: usize,
    pub hidden: usize,
    pub n_layers: usize,
    /// Per layer: `(4H, in_l)` where `in_l` is `input_dim` or `hidden`.
    pub w_ih: Vec<Tensor>,
    /// Per layer: `(4H, H)`.
    pub w_hh: Vec<Tensor>,
    /// Per layer: `(4H)`.
    pub bias: Vec<Tensor>,
    pub gw_ih: Vec<Tensor>,
    pub gw_hh: Vec<Tensor>,
    pub gbias: Vec<Tensor>,
}

/// Cached gate activations and states of one forward pass.
pub struct LstmCache {
    /// Inputs to each layer per time step: `[layer][t]` of shape `(B, in_l)`.
    xs: Vec<Vec<Tensor>>,
    /// Gates per layer per step: i, f, g, o, each `(B, H)`.
    gates: Vec<Vec<[Tensor; 4]>>,
    cells: Vec<Vec<Tensor>>,
    hiddens: Vec<Vec<Tensor>>,
    batch: usize,
    steps: usize,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Lstm {
    pub fn new(input_dim: usize, hidden: usize, n_layers: usize, rng: &mut DetRng) -> Lstm {
        let mut w_ih = Vec::new();
        let mut w_hh = Vec::new();
        let mut bias = Vec::new();
        for l in 0..n_layers {
            let in_l = if l == 0 { input_dim } else { hidden };
            let mut r = rng.derive(100 + l as u64);
            let bound = (1.0 / hidden as f64).sqrt();
            let mut wi = Tensor::zeros(&[4 * hidden, in_l]);
            for v in wi.data_mut() {
                *v = r.uniform(bound);
            }
            let mut wh = Tensor::zeros(&[4 * hidden, hidden]);
            for v in wh.data_mut() {
                *v = r.uniform(bound);
            }
            let mut b = Tensor::zeros(&[4 * hidden]);
            for v in b.data_mut() {
                *v = r.uniform(bound);
            }
            w_ih.push(wi);
            w_hh.push(wh);
            bias.push(b);
        }
        let zeros_like = |ts: &Vec<Tensor>| ts.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Lstm {
            input_dim,
            hidden,
            n_layers,
            gw_ih: zeros_like(&w_ih),
            gw_hh: zeros_like(&w_hh),
            gbias: zeros_like(&bias),
            w_ih,
            w_hh,
            bias,
        }
    }

    pub fn zero_grads(&mut self) {
        for g in self
            .gw_ih
            .iter_mut()
            .chain(self.gw_hh.iter_mut())
            .chain(self.gbias.iter_mut())
        {
            g.fill(0.0);
        }
    }

    pub fn n_params(&self) -> usize {
        self.w_ih.iter().map(|t| t.len()).sum::<usize>()
            + self.w_hh.iter().map(|t| t.len()).sum::<usize>()
            + self.bias.iter().map(|t| t.len()).sum::<usize>()
    }

    /// Runs the stack over a `(B, T, input_dim)` sequence; returns the top
    /// layer's hidden states `(B, T, H)` and the cache for backprop.
    pub fn forward(&self, seq: &Tensor) -> Result<(Tensor, LstmCache)> {
        let s = seq.shape();
        if s.len() != 3 || s[2] != self.input_dim {
            return Err(Error::Shape(format!(
                "expected (B, T, {}), got {s:?}",
                self.input_dim
            )));
        }
        let (batch, steps) = (s[0], s[1]);
        if steps == 0 {
            return Err(Error::Argument("empty sequence".into()));
        }
        let h = self.hidden;
        let mut cache = LstmCache {
            xs: Vec::with_capacity(self.n_layers),
            gates: Vec::with_capacity(self.n_layers),
            cells: Vec::with_capacity(self.n_layers),
            hiddens: Vec::with_capacity(self.n_layers),
            batch,
            steps,
        };
        // slice the input into per-step (B, in) tensors
        let mut layer_input: Vec<Tensor> = (0..steps)
            .map(|t| {
                let mut x = Tensor::zeros(&[batch, self.input_dim]);
                for b in 0..batch {
                    for k in 0..self.input_dim {
                        x.data_mut()[b * self.input_dim + k] =
                            seq.data()[(b * steps + t) * self.input_dim + k];
                    }
                }
                x
            })
            .collect();

        for l in 0..self.n_layers {
            let in_l = if l == 0 { self.input_dim } else { h };
            let wi = &self.w_ih[l];
            let wh = &self.w_hh[l];
            let bias = &self.bias[l];
            let mut h_prev = Tensor::zeros(&[batch, h]);
            let mut c_prev = Tensor::zeros(&[batch, h]);
            let mut gates_l = Vec::with_capacity(steps);
            let mut cells_l = Vec::with_capacity(steps);
            let mut hiddens_l = Vec::with_capacity(steps);
            for x in layer_input.iter().take(steps) {
                let mut pre = Tensor::zeros(&[batch, 4 * h]);
                for b in 0..batch {
                    let xrow = &x.data()[b * in_l..(b + 1) * in_l];
                    let hrow = &h_prev.data()[b * h..(b + 1) * h];
                    let prow = &mut pre.data_mut()[b * 4 * h..(b + 1) * 4 * h];
                    for (r, p) in prow.iter_mut().enumerate() {
                        let mut acc = bias.data()[r];
                        let wirow = &wi.data()[r * in_l..(r + 1) * in_l];
                        for (k, &xv) in xrow.iter().enumerate() {
                            acc += wirow[k] * xv;
                        }
                        let whrow = &wh.data()[r * h..(r + 1) * h];
                        for (k, &hv) in hrow.iter().enumerate() {
                            acc += whrow[k] * hv;
                        }
                        *p = acc;
                    }
                }
                let mut gi = Tensor::zeros(&[batch, h]);
                let mut gf = Tensor::zeros(&[batch, h]);
                let mut gg = Tensor::zeros(&[batch, h]);
                let mut go = Tensor::zeros(&[batch, h]);
                let mut c_t = Tensor::zeros(&[batch, h]);
                let mut h_t = Tensor::zeros(&[batch, h]);
                for b in 0..batch {
                    for k in 0..h {
                        let base = b * 4 * h;
                        let i_v = sigmoid(pre.data()[base + k]);
                        let f_v = sigmoid(pre.data()[base + h + k]);
                        let g_v = pre.data()[base + 2 * h + k].tanh();
                        let o_v = sigmoid(pre.data()[base + 3 * h + k]);
                        let c_v = f_v * c_prev.data()[b * h + k] + i_v * g_v;
                        gi.data_mut()[b * h + k] = i_v;
                        gf.data_mut()[b * h + k] = f_v;
                        gg.data_mut()[b * h + k] = g_v;
                        go.data_mut()[b * h + k] = o_v;
                        c_t.data_mut()[b * h + k] = c_v;
                        h_t.data_mut()[b * h + k] = o_v * c_v.tanh();
                    }
                }
                gates_l.push([gi, gf, gg, go]);
                cells_l.push(c_t.clone());
                hiddens_l.push(h_t.clone());
                c_prev = c_t;
                h_prev = h_t;
            }
            cache.xs.push(std::mem::take(&mut layer_input));
            layer_input = hiddens_l.clone();
            cache.gates.push(gates_l);
            cache.cells.push(cells_l);
            cache.hiddens.push(hiddens_l);
        }
        // pack the top hidden states into (B, T, H)
        let mut out = Tensor::zeros(&[batch, steps, h]);
        for t in 0..steps {
            let ht = &cache.hiddens[self.n_layers - 1][t];
            for b in 0..batch {
                for k in 0..h {
                    out.data_mut()[(b * steps + t) * h + k] = ht.data()[b * h + k];
                }
            }
        }
        Ok((out, cache))
    }

    /// Backpropagation through time given the gradient of the top hidden
    /// sequence `(B, T, H)`. Accumulates parameter gradients.
    pub fn backward(&mut self, cache: &LstmCache, d_out: &Tensor) -> Result<()> {
        let (batch, steps, h) = (cache.batch, cache.steps, self.hidden);
        if d_out.shape() != [batch, steps, h] {
            return Err(Error::Shape(format!(
                "expected gradient ({batch}, {steps}, {h}), got {:?}",
                d_out.shape()
            )));
        }
        // gradient w.r.t. each layer's hidden sequence, top first
        let mut d_hidden_seq: Vec<Tensor> = (0..steps)
            .map(|t| {
                let mut g = Tensor::zeros(&[batch, h]);
                for b in 0..batch {
                    for k in 0..h {
                        g.data_mut()[b * h + k] = d_out.data()[(b * steps + t) * h + k];
                    }
                }
                g
            })
            .collect();

        for l in (0..self.n_layers).rev() {
            let in_l = if l == 0 { self.input_dim } else { h };
            let mut d_h_next = Tensor::zeros(&[batch, h]);
            let mut d_c_next = Tensor::zeros(&[batch, h]);
            let mut d_inputs: Vec<Tensor> =
                (0..steps).map(|_| Tensor::zeros(&[batch, in_l])).collect();
            for t in (0..steps).rev() {
                let [gi, gf, gg, go] = &cache.gates[l][t];
                let c_t = &cache.cells[l][t];
                let zeros = Tensor::zeros(&[batch, h]);
                let c_prev = if t == 0 { &zeros } else { &cache.cells[l][t - 1] };
                let h_prev = if t == 0 { &zeros } else { &cache.hiddens[l][t - 1] };
                let mut d_pre = Tensor::zeros(&[batch, 4 * h]);
                for b in 0..batch {
                    for k in 0..h {
                        let idx = b * h + k;
                        let dh = d_hidden_seq[t].data()[idx] + d_h_next.data()[idx];
                        let tc = c_t.data()[idx].tanh();
                        let o_v = go.data()[idx];
                        let d_o = dh * tc;
                        let d_c = dh * o_v * (1.0 - tc * tc) + d_c_next.data()[idx];
                        let i_v = gi.data()[idx];
                        let f_v = gf.data()[idx];
                        let g_v = gg.data()[idx];
                        let d_i = d_c * g_v;
                        let d_f = d_c * c_prev.data()[idx];
                        let d_g = d_c * i_v;
                        d_c_next.data_mut()[idx] = d_c * f_v;
                        let base = b * 4 * h;
                        d_pre.data_mut()[base + k] = d_i * i_v * (1.0 - i_v);
                        d_pre.data_mut()[base + h + k] = d_f * f_v * (1.0 - f_v);
                        d_pre.data_mut()[base + 2 * h + k] = d_g * (1.0 - g_v * g_v);
                        d_pre.data_mut()[base + 3 * h + k] = d_o * o_v * (1.0 - o_v);
                    }
                }
                // parameter and carried gradients
                let x_t = &cache.xs[l][t];
                for b in 0..batch {
                    let prow = &d_pre.data()[b * 4 * h..(b + 1) * 4 * h];
                    let xrow = &x_t.data()[b * in_l..(b + 1) * in_l];
                    let hrow = &h_prev.data()[b * h..(b + 1) * h];
                    for (r, &pv) in prow.iter().enumerate() {
                        if pv == 0.0 {
                            continue;
                        }
                        let gw_i = &mut self.gw_ih[l].data_mut()[r * in_l..(r + 1) * in_l];
                        for (k, &xv) in xrow.iter().enumerate() {
                            gw_i[k] += pv * xv;
                        }
                        let gw_h = &mut self.gw_hh[l].data_mut()[r * h..(r + 1) * h];
                        for (k, &hv) in hrow.iter().enumerate() {
                            gw_h[k] += pv * hv;
                        }
                        self.gbias[l].data_mut()[r] += pv;
                    }
                    // dx = W_ih^T d_pre ; dh_prev = W_hh^T d_pre
                    let dxrow = &mut d_inputs[t].data_mut()[b * in_l..(b + 1) * in_l];
                    for (r, &pv) in prow.iter().enumerate() {
                        if pv == 0.0 {
                            continue;
                        }
                        let wirow = &self.w_ih[l].data()[r * in_l..(r + 1) * in_l];
                        for (k, dx) in dxrow.iter_mut().enumerate() {
                            *dx += wirow[k] * pv;
                        }
                    }
                    let dhrow = &mut d_h_next.data_mut()[b * h..(b + 1) * h];
                    dhrow.fill(0.0);
                    for (r, &pv) in prow.iter().enumerate() {
                        if pv == 0.0 {
                            continue;
                        }
                        let whrow = &self.w_hh[l].data()[r * h..(r + 1) * h];
                        for (k, dh) in dhrow.iter_mut().enumerate() {
                            *dh += whrow[k] * pv;
                        }
                    }
                }
            }
            d_hidden_seq = d_inputs;
        }
        Ok(())
    }

    pub fn param_slots(&mut self) -> Vec<(&mut Tensor, &Tensor)> {
        let mut slots = Vec::new();
        for ((w, g), _) in self
            .w_ih
            .iter_mut()
            .zip(self.gw_ih.iter())
            .zip(0..self.n_layers)
        {
            slots.push((w, g));
        }
        for (w, g) in self.w_hh.iter_mut().zip(self.gw_hh.iter()) {
            slots.push((w, g));
        }
        for (b, g) in self.bias.iter_mut().zip(self.gbias.iter()) {
            slots.push((b, g));
        }
        slots
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for t in self.w_ih.iter().chain(&self.w_hh).chain(&self.bias) {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn grads_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for t in self.gw_ih.iter().chain(&self.gw_hh).chain(&self.gbias) {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let mut at = 0;
        for t in self
            .w_ih
            .iter_mut()
            .chain(self.w_hh.iter_mut())
            .chain(self.bias.iter_mut())
        {
            for v in t.data_mut() {
                *v = flat[at];
                at += 1;
            }
        }
        if at != flat.len() {
            return Err(Error::Shape("parameter count mismatch".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(batch: usize, steps: usize, dim: usize, seed: u64) -> Tensor {
        let mut rng = DetRng::new(seed);
        let mut t = Tensor::zeros(&[batch, steps, dim]);
        for v in t.data_mut() {
            *v = rng.uniform(1.0);
        }
        t
    }

    #[test]
    fn zero_parameters_give_zero_outputs() {
        let mut rng = DetRng::new(1);
        let mut lstm = Lstm::new(2, 5, 2, &mut rng);
        let zeros = vec![0.0; lstm.params_flat().len()];
        lstm.set_params_flat(&zeros).unwrap();
        let x = seq(2, 4, 2, 3);
        let (y, _) = lstm.forward(&x).unwrap();
        // h = sigmoid(0) * tanh(c) with c = 0 everywhere
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_equals_cell_evaluation() {
        let mut rng = DetRng::new(2);
        let lstm = Lstm::new(2, 4, 2, &mut rng);
        let x1 = seq(1, 1, 2, 7);
        let (y1, _) = lstm.forward(&x1).unwrap();
        // manual single-cell evaluation of layer 0 then layer 1 at t = 0
        let h = 4;
        let mut layer_in = vec![x1.data()[0], x1.data()[1]];
        for l in 0..2 {
            let in_l = if l == 0 { 2 } else { h };
            let mut h_out = vec![0.0; h];
            for k in 0..h {
                let mut pre = [0.0; 4];
                for (gate, p) in pre.iter_mut().enumerate() {
                    let r = gate * h + k;
                    let mut acc = lstm.bias[l].data()[r];
                    for (kk, &xv) in layer_in.iter().enumerate() {
                        acc += lstm.w_ih[l].data()[r * in_l + kk] * xv;
                    }
                    *p = acc;
                }
                let i_v = sigmoid(pre[0]);
                let g_v = pre[2].tanh();
                let o_v = sigmoid(pre[3]);
                let c_v = i_v * g_v;
                h_out[k] = o_v * c_v.tanh();
            }
            layer_in = h_out;
        }
        for k in 0..h {
            assert!((y1.data()[k] - layer_in[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let mut rng = DetRng::new(3);
        let lstm = Lstm::new(2, 3, 1, &mut rng);
        let x = Tensor::zeros(&[1, 0, 2]);
        assert!(lstm.forward(&x).is_err());
    }

    #[test]
    fn bptt_gradients_match_finite_differences() {
        let mut rng = DetRng::new(4);
        let mut lstm = Lstm::new(2, 3, 2, &mut rng);
        let x = seq(2, 3, 2, 5);
        let target = seq(2, 3, 3, 6);
        let loss = |lstm: &Lstm, x: &Tensor| -> f64 {
            let (y, _) = lstm.forward(x).unwrap();
            y.data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        };
        lstm.zero_grads();
        let (y, cache) = lstm.forward(&x).unwrap();
        let mut dy = Tensor::zeros(y.shape());
        for ((g, &yv), &tv) in dy.data_mut().iter_mut().zip(y.data()).zip(target.data()) {
            *g = 2.0 * (yv - tv);
        }
        lstm.backward(&cache, &dy).unwrap();
        let flat = lstm.params_flat();
        let grads = lstm.grads_flat();
        let h = 1e-6;
        let mut max_err: f64 = 0.0;
        for i in 0..flat.len() {
            let mut p = flat.clone();
            p[i] = flat[i] + h;
            lstm.set_params_flat(&p).unwrap();
            let lp = loss(&lstm, &x);
            p[i] = flat[i] - h;
            lstm.set_params_flat(&p).unwrap();
            let lm = loss(&lstm, &x);
            p[i] = flat[i];
            lstm.set_params_flat(&p).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let denom = grads[i].abs().max(fd.abs()).max(1.0);
            max_err = max_err.max((grads[i] - fd).abs() / denom);
        }
        assert!(max_err < 1e-5, "max relative gradient error {max_err}");
    }
}
