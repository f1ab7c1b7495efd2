//! DenseNet-style aggregation over a buffer of earlier layer outputs, with
//! the two weight-sharing simplifications of its 1x1 bottleneck conv:
//! by lag (the conv applied to `x^{t-s}` depends only on `s`) and by ordinal
//! (the conv applied to `x^l` depends only on `l`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Init, Net, Role, Var};
use crate::kernels::{conv2d, dense::concat_channels};
use crate::params::{ParamId, ParamKind};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenseMode {
    /// `x^t = Conv3(Conv1(concat(x^0, ..., x^{t-1})))`.
    DenseUnshared,
    /// `Conv1_s` applied to `x^{t-s}`, shared across layers of a block.
    ByLag,
    /// `Conv1_l` applied to `x^l`, shared across layers of a block.
    ByOrdinal,
}

/// Block-local store of earlier outputs. `x0` is the block input;
/// `slots` holds `x^1 .. x^{t-1}`, most recent first for [`DenseMode::ByLag`]
/// and in ordinal order otherwise.
#[derive(Clone, Debug)]
pub struct DenseBuffer {
    pub mode: DenseMode,
    pub x0: Var,
    slots: Vec<Var>,
}

impl DenseBuffer {
    pub fn new(mode: DenseMode, x0: Var) -> Self {
        DenseBuffer {
            mode,
            x0,
            slots: Vec::new(),
        }
    }

    pub fn slots(&self) -> &[Var] {
        &self.slots
    }

    /// Index `t` of the next layer (1-based).
    pub fn next_layer(&self) -> usize {
        self.slots.len() + 1
    }

    /// `x^l` for `1 <= l < t`.
    pub fn ordinal(&self, l: usize) -> Var {
        match self.mode {
            DenseMode::ByLag => self.slots[self.slots.len() - l],
            _ => self.slots[l - 1],
        }
    }

    /// `x^{t-s}` for `1 <= s < t`.
    pub fn lag(&self, s: usize) -> Var {
        self.ordinal(self.next_layer() - s)
    }

    pub fn push(&mut self, x: Var) {
        match self.mode {
            DenseMode::ByLag => self.slots.insert(0, x),
            _ => self.slots.push(x),
        }
    }

    /// `[x^0, x^1, ..., x^{t-1}]`.
    pub fn in_order(&self) -> Vec<Var> {
        let mut v = vec![self.x0];
        v.extend((1..self.next_layer()).map(|l| self.ordinal(l)));
        v
    }

    /// Block output: channel concat of every stored feature in ordinal order.
    pub fn concat<T: Scalar>(&self, net: &mut Net<T>, name: &str) -> Result<Var> {
        net.concat(name, &self.in_order())
    }
}

/// Lazily grown bank of shared 1x1 convs for one block.
#[derive(Clone, Debug)]
pub struct SharedBank {
    pub size: usize,
    pub cin: usize,
    pub cout: usize,
    convs: Vec<ParamId>,
}

impl SharedBank {
    pub fn new(size: usize, cin: usize, cout: usize) -> Self {
        SharedBank {
            size,
            cin,
            cout,
            convs: Vec::new(),
        }
    }

    /// Allocated buffers, indexed from 1.
    pub fn convs(&self) -> &[ParamId] {
        &self.convs
    }

    /// Weight site `name` for bank entry `index` (1-based), allocating the
    /// buffer as `<bank_name>.<index>.weight` on first use.
    fn site<T: Scalar>(&mut self, net: &mut Net<T>, index: usize, name: &str, bank_name: &str) -> Result<Var> {
        if index == 0 || index > self.size {
            return Err(Error::BankExhausted {
                index,
                size: self.size,
            });
        }
        while self.convs.len() < index {
            let i = self.convs.len() + 1;
            let shape = Shape::new(self.cout, self.cin, 1, 1);
            let value = Init::HeNormal.tensor(shape, net.rng());
            let full = format!("{bank_name}.{i}.weight");
            let id = net.store_mut().add(&full, ParamKind::Weight, value)?;
            self.convs.push(id);
        }
        net.shared_param(name, self.convs[index - 1])
    }
}

/// Layer sizes of a DenseNet-BC layer.
#[derive(Clone, Copy, Debug)]
pub struct DenseLayerDims {
    pub growth: usize,
    /// Bottleneck width (4 x growth in DenseNet-BC).
    pub bottleneck: usize,
}

/// One BN-ReLU-Conv1x1-BN-ReLU-Conv3x3 layer reading the buffer, named under
/// the caller's scope. Appends `x^t` to the buffer and returns it. In the
/// shared modes each input piece gets its own per-layer BN-ReLU, which is
/// the same map as one BN-ReLU over the concatenation.
pub fn dense_layer_forward<T: Scalar>(
    net: &mut Net<T>,
    buf: &mut DenseBuffer,
    bank: &mut SharedBank,
    bank_name: &str,
    dims: DenseLayerDims,
) -> Result<Var> {
    let t = buf.next_layer();
    let b = match buf.mode {
        DenseMode::DenseUnshared => {
            let cat = buf.concat(net, "concat")?;
            let a = net.bn_relu("bn1", cat)?;
            net.conv2d("conv1", a, dims.bottleneck, 1, 1, 0)?
        }
        mode => {
            let a0 = net.bn_relu("bn1.0", buf.x0)?;
            let mut acc = net.conv2d("conv1.0", a0, dims.bottleneck, 1, 1, 0)?;
            for s in 1..t {
                let (piece, index) = match mode {
                    DenseMode::ByLag => (buf.lag(s), s),
                    _ => (buf.ordinal(s), s),
                };
                let a = net.bn_relu(&format!("bn1.{s}"), piece)?;
                let z = net.with_role(Role::Aggregation, |net| -> Result<Var> {
                    let w = bank.site(net, index, &format!("conv1.{s}.weight"), bank_name)?;
                    net.conv(&format!("conv1.{s}"), a, w, 1, 0)
                })?;
                acc = net.add(&format!("sum.{s}"), acc, z)?;
            }
            acc
        }
    };
    let a = net.bn_relu("bn2", b)?;
    let x = net.conv2d("conv3", a, dims.growth, 3, 1, 1)?;
    buf.push(x);
    Ok(x)
}

/// Max `|Conv1(concat(x^0..)) - sum_l Conv1_l(x^l)|`, where `Conv1_l` is the
/// slice of the kernel's input channels that meets `x^l`.
pub fn conv1_partition_check<T: Scalar>(weight: &Tensor<T>, inputs: &[&Tensor<T>]) -> Result<f64> {
    let total: usize = inputs.iter().map(|x| x.shape().c()).sum();
    let [cout, cin, kh, kw] = weight.shape().0;
    if total != cin {
        return Err(Error::shape(
            "conv1_partition_check",
            format!("inputs carry {total} channels but the kernel expects Cin={cin}"),
        ));
    }
    let whole = conv2d(&concat_channels(inputs)?, weight, None, 1, 0)?;
    let mut sum: Option<Tensor<T>> = None;
    let mut offset = 0;
    for x in inputs {
        let c = x.shape().c();
        let slice = Tensor::from_fn(Shape::new(cout, c, kh, kw), |[o, i, y, z]| {
            weight.at([o, offset + i, y, z])
        });
        let part = conv2d(x, &slice, None, 1, 0)?;
        match sum.as_mut() {
            Some(s) => s.add_assign(&part),
            None => sum = Some(part),
        }
        offset += c;
    }
    Ok(whole.max_abs_diff(&sum.expect("at least one input")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lag_and_ordinal_views_agree() {
        let mut net = Net::<f64>::new(0);
        let x0 = net.input("x0", 3, 2, 2).unwrap();
        let xs: Vec<Var> = (0..4).map(|i| net.input(&format!("x{}", i + 1), 2, 2, 2).unwrap()).collect();
        let mut lag = DenseBuffer::new(DenseMode::ByLag, x0);
        let mut ord = DenseBuffer::new(DenseMode::ByOrdinal, x0);
        for &x in &xs {
            lag.push(x);
            ord.push(x);
        }
        assert_eq!(lag.slots()[0], xs[3]);
        assert_eq!(ord.slots()[0], xs[0]);
        assert_eq!(lag.in_order(), ord.in_order());
        for l in 1..5 {
            assert_eq!(lag.ordinal(l), ord.ordinal(l));
            assert_eq!(lag.lag(l), xs[4 - l]);
        }
    }

    #[test]
    fn bank_rejects_index_past_size() {
        let mut net = Net::<f64>::new(0);
        let mut bank = SharedBank::new(2, 4, 8);
        assert!(bank.site(&mut net, 2, "a", "bank").is_ok());
        assert_eq!(bank.convs().len(), 2);
        assert!(matches!(
            bank.site(&mut net, 3, "b", "bank"),
            Err(Error::BankExhausted { index: 3, size: 2 })
        ));
    }

    #[test]
    fn partition_of_single_input_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::<f64>::randn(Shape::new(6, 4, 1, 1), 1.0, &mut rng);
        let x = Tensor::randn(Shape::new(2, 4, 3, 3), 1.0, &mut rng);
        assert_eq!(conv1_partition_check(&w, &[&x]).unwrap(), 0.0);
        let z = Tensor::zeros(Shape::new(2, 1, 3, 3));
        assert!(conv1_partition_check(&w, &[&x, &z]).is_err());
    }
}
