use crate::error::{Error, Result};
use crate::numerics::{flops, CustomOp, Graph, Tensor, Var};

struct ConvOp {
    width: usize,
    /// Inputs that precede the first row, `[width − 1, C]`; treated as constants.
    tail: Tensor,
}

impl ConvOp {
    fn padded<'a>(&'a self, x: &'a Tensor) -> impl Fn(isize, usize) -> f64 + 'a {
        let pad = self.width as isize - 1;
        move |t, c| {
            if t < 0 {
                self.tail.get2((t + pad) as usize, c)
            } else {
                x.get2(t as usize, c)
            }
        }
    }

    fn forward(&self, x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (t_len, ch) = x.dims2()?;
        let k = self.width;
        let xp = self.padded(x);
        let mut y = vec![0.0; t_len * ch];
        for t in 0..t_len {
            for c in 0..ch {
                let mut acc = bias.data()[c];
                for j in 0..k {
                    // tap j reads x[t − (k − 1) + j]
                    acc += w.data()[c * k + j] * xp(t as isize + j as isize - (k as isize - 1), c);
                }
                y[t * ch + c] = acc;
            }
        }
        Tensor::new(vec![t_len, ch], y)
    }
}

impl CustomOp for ConvOp {
    fn name(&self) -> &'static str {
        "causal_conv1d"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (t_len, ch) = x.dims2()?;
        let k = self.width;
        let xp = self.padded(x);
        let mut gx = vec![0.0; t_len * ch];
        let mut gw = vec![0.0; ch * k];
        let mut gb = vec![0.0; ch];
        for t in 0..t_len {
            for c in 0..ch {
                let g = grad.get2(t, c);
                gb[c] += g;
                for j in 0..k {
                    let src = t as isize + j as isize - (k as isize - 1);
                    gw[c * k + j] += g * xp(src, c);
                    if src >= 0 {
                        gx[src as usize * ch + c] += g * w.data()[c * k + j];
                    }
                }
            }
        }
        Ok(vec![
            Some(Tensor::new(vec![t_len, ch], gx)?),
            Some(Tensor::new(w.shape().to_vec(), gw)?),
            Some(Tensor::new(vec![ch], gb)?),
        ])
    }
}

/// Depthwise causal convolution of `x: [T, C]` with per-channel taps
/// `w: [C, K]` and `bias: [C]`. `tail: [K − 1, C]` holds the inputs that
/// precede row 0 (zeros at the start of a stream).
///
/// Returns the output and, when values are materialized, the tail to carry
/// into the next call.
pub fn causal_conv1d(g: &mut Graph, x: Var, w: Var, bias: Var, tail: &Tensor) -> Result<(Var, Option<Tensor>)> {
    let (t_len, ch, k) = match (g.shape(x), g.shape(w)) {
        ([t, c], [c2, k]) if c == c2 && *k >= 1 => (*t, *c, *k),
        (xs, ws) => return Err(Error::dim("causal_conv1d", format!("x {xs:?} and taps {ws:?} disagree"))),
    };
    if g.shape(bias) != [ch] {
        return Err(Error::dim("causal_conv1d", format!("bias must be [{ch}], got {:?}", g.shape(bias))));
    }
    if tail.shape() != [k - 1, ch] {
        return Err(Error::dim("causal_conv1d", format!("tail must be [{}, {ch}], got {:?}", k - 1, tail.shape())));
    }
    let op = ConvOp { width: k, tail: tail.clone() };
    let cost = flops::conv(t_len, ch, k);
    match g.try_value(x) {
        None => Ok((g.custom(&[x, w, bias], vec![t_len, ch], None, cost, Box::new(op))?, None)),
        Some(xv) => {
            let y = op.forward(xv, g.value(w), g.value(bias))?;
            // The next tail is the last k − 1 rows of tail ‖ x.
            let joined = Tensor::concat_rows(&[tail, xv])?;
            let next = joined.slice_rows(joined.rows() - (k - 1), k - 1)?;
            let v = g.custom(&[x, w, bias], vec![t_len, ch], Some(y), cost, Box::new(op))?;
            Ok((v, Some(next)))
        }
    }
}
