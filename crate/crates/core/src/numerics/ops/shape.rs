use crate::error::{Error, Result};
use crate::numerics::tape::{Backward, GradSink, Tape, Var};
use crate::numerics::tensor::Tensor;

struct ReshapeBack(Var);
impl Backward for ReshapeBack {
    fn backward(&self, _: &Tape, _: Var, grad: &[f64], sink: &mut GradSink<'_>) {
        sink.add(self.0, grad);
    }
}

struct SliceLastBack {
    input: Var,
    start: usize,
    len: usize,
    width: usize,
}
impl Backward for SliceLastBack {
    fn backward(&self, _: &Tape, _: Var, grad: &[f64], sink: &mut GradSink<'_>) {
        if let Some(slot) = sink.slot(self.input) {
            for (row, g) in slot
                .chunks_exact_mut(self.width)
                .zip(grad.chunks_exact(self.len))
            {
                row[self.start..self.start + self.len]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(s, g)| *s += g);
            }
        }
    }
}

struct ConcatLastBack {
    inputs: Vec<(Var, usize)>,
    width: usize,
}
impl Backward for ConcatLastBack {
    fn backward(&self, _: &Tape, _: Var, grad: &[f64], sink: &mut GradSink<'_>) {
        let mut start = 0;
        for &(v, w) in &self.inputs {
            if let Some(slot) = sink.slot(v) {
                for (row, g) in slot.chunks_exact_mut(w).zip(grad.chunks_exact(self.width)) {
                    row.iter_mut()
                        .zip(&g[start..start + w])
                        .for_each(|(s, g)| *s += g);
                }
            }
            start += w;
        }
    }
}

/// Index permutation shared by the token layout conversions: `map[i]` is the
/// source offset of output element `i`.
struct PermuteBack {
    input: Var,
    map: Vec<usize>,
}
impl Backward for PermuteBack {
    fn backward(&self, _: &Tape, _: Var, grad: &[f64], sink: &mut GradSink<'_>) {
        if let Some(slot) = sink.slot(self.input) {
            for (g, &src) in grad.iter().zip(&self.map) {
                slot[src] += g;
            }
        }
    }
}

impl Tape {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push_op(value, &[a], ReshapeBack(a)))
    }

    /// Columns `start..start + len` of the trailing axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let width = *shape.last().unwrap();
        if len == 0 || start + len > width {
            return Err(Error::Contract(format!(
                "slice_last {start}..{} outside trailing extent {width}",
                start + len
            )));
        }
        let data = self
            .value(a)
            .data()
            .chunks_exact(width)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        let value = Tensor::from_parts(out_shape, data);
        Ok(self.push_op(
            value,
            &[a],
            SliceLastBack {
                input: a,
                start,
                len,
                width,
            },
        ))
    }

    /// Concatenation along the trailing axis; leading extents must agree.
    pub fn concat_last(&mut self, vars: &[Var]) -> Result<Var> {
        let first = vars
            .first()
            .ok_or_else(|| Error::Contract("concat of an empty list".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut inputs = Vec::with_capacity(vars.len());
        for &v in vars {
            let s = self.shape(v);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::Dimension {
                    op: "concat_last",
                    left: self.shape(*first).to_vec(),
                    right: s.to_vec(),
                });
            }
            inputs.push((v, *s.last().unwrap()));
        }
        let width: usize = inputs.iter().map(|&(_, w)| w).sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &(v, w) in &inputs {
                data.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(width);
        let value = Tensor::from_parts(shape, data);
        Ok(self.push_op(value, vars, ConcatLastBack { inputs, width }))
    }

    /// NCHW feature map to per-sample token rows: `[N, H*W, C]`.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = nchw(self, "to_tokens", x)?;
        let s = h * w;
        let mut map = Vec::with_capacity(n * s * c);
        for b in 0..n {
            for p in 0..s {
                for ch in 0..c {
                    map.push((b * c + ch) * s + p);
                }
            }
        }
        Ok(self.permute(x, vec![n, s, c], map))
    }

    /// Inverse of [`Tape::to_tokens`]: `[N, H*W, C]` back to NCHW.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != h * w {
            return Err(Error::Dimension {
                op: "from_tokens",
                left: shape,
                right: vec![h, w],
            });
        }
        let (n, s, c) = (shape[0], shape[1], shape[2]);
        let mut map = Vec::with_capacity(n * s * c);
        for b in 0..n {
            for ch in 0..c {
                for p in 0..s {
                    map.push((b * s + p) * c + ch);
                }
            }
        }
        Ok(self.permute(x, vec![n, c, h, w], map))
    }

    fn permute(&mut self, x: Var, shape: Vec<usize>, map: Vec<usize>) -> Var {
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let value = Tensor::from_parts(shape, data);
        self.push_op(value, &[x], PermuteBack { input: x, map })
    }
}

pub(crate) fn nchw(tape: &Tape, op: &'static str, x: Var) -> Result<[usize; 4]> {
    let s = tape.shape(x);
    <[usize; 4]>::try_from(s).map_err(|_| Error::Rank {
        op,
        expected: 4,
        shape: s.to_vec(),
    })
}
