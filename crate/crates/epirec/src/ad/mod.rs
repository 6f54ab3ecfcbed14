//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Tensors are either real or complex. For complex-linear operators the
//! cotangent convention is `g = dL/d(Re z) + i*dL/d(Im z)`, under which the
//! backward rule of a complex-linear map is its adjoint; conjugation maps
//! cotangents to their conjugates. Real losses only.
//!
//! Training unrolls everything through this tape: conjugate-gradient data
//! consistency, the dual-domain denoisers, the off-resonance operator
//! (differentiable in both the image and the field map), and the
//! coordinate-MLP field estimator.

pub mod fd;
pub mod nn;

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::rc::Rc;

use num_complex::Complex64;

use crate::epi::kernels::{
    offres_adj_field_grad, offres_adj_kernel, offres_fwd_field_grad, offres_fwd_kernel,
};
use crate::epi::{EpiTiming, LinePhases};
use crate::numerics::fft2c_unchecked;
use crate::tensor::{CTensor, RTensor};

pub type Id = usize;

#[derive(Clone, Debug)]
pub enum Value {
    R(RTensor),
    C(CTensor),
}

impl Value {
    pub fn as_r(&self) -> &RTensor {
        match self {
            Value::R(t) => t,
            Value::C(_) => panic!("expected real tensor"),
        }
    }

    pub fn as_c(&self) -> &CTensor {
        match self {
            Value::C(t) => t,
            Value::R(_) => panic!("expected complex tensor"),
        }
    }
}

enum Op {
    LeafR,
    LeafC,
    ConstR,
    ConstC,
    // complex arithmetic
    AddC(Id, Id),
    SubC(Id, Id),
    AddManyC(Vec<Id>),
    ScaleC(Id, f64),
    /// a + s*b with a real scalar node s
    AxpyC { a: Id, s: Id, b: Id },
    /// elementwise multiply by a complex constant (shape equal)
    CMulConst(Id, Rc<CTensor>),
    ConjC(Id),
    /// elementwise multiply by a real constant mask/window, broadcast over
    /// leading channel axes
    MaskMulC(Id, Rc<RTensor>),
    /// image -> coil stack, multiplying by constant sensitivities
    CoilMul(Id, Rc<CTensor>),
    /// coil stack -> image, sum of conj(C_c) * y_c
    CoilCombine(Id, Rc<CTensor>),
    Fft2C(Id),
    Ifft2C(Id),
    OffresFwd {
        x: Id,
        field: Id,
        ph: Rc<LinePhases>,
        lines: Rc<Vec<usize>>,
    },
    OffresAdj {
        k: Id,
        field: Id,
        ph: Rc<LinePhases>,
        lines: Rc<Vec<usize>>,
    },
    VcAugment(Id),
    VcReduce(Id),
    /// C[c,h,w] -> R[2c,h,w] as (re, im) plane pairs
    CToPlanes(Id),
    PlanesToC(Id),
    MagC(Id),
    SqNormC(Id),
    L1NormC(Id),
    DotReC(Id, Id),
    // real arithmetic
    AddR(Id, Id),
    SubR(Id, Id),
    AddManyR(Vec<Id>),
    ScaleR(Id, f64),
    MulR(Id, Id),
    SubConstR(Id),
    Relu(Id),
    Tanh(Id),
    Conv2d { x: Id, w: Id, b: Id },
    Linear { x: Id, w: Id, b: Id },
    ConcatCh(Vec<Id>),
    ConcatCols(Vec<Id>),
    ChwToRows(Id),
    RowsToImage(Id, usize, usize),
    SumR(Id),
    SqNormR(Id),
    L1NormR(Id),
    GradY(Id),
    GradX(Id),
    SMul(Id, Id),
    SDiv(Id, Id),
    SSqrt(Id),
    SAddConst(Id),
}

struct Node {
    op: Op,
    value: Value,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    phases: HashMap<(Id, u64), Rc<LinePhases>>,
}

/// Gradients indexed by node id after a backward pass.
pub struct Grads {
    inner: Vec<Option<Value>>,
}

impl Grads {
    pub fn r(&self, id: Id) -> Option<&RTensor> {
        self.inner[id].as_ref().map(|v| v.as_r())
    }

    pub fn c(&self, id: Id) -> Option<&CTensor> {
        self.inner[id].as_ref().map(|v| v.as_c())
    }
}

fn timing_key(t: &EpiTiming) -> u64 {
    let mut h = DefaultHasher::new();
    t.esp_s.to_bits().hash(&mut h);
    t.polarity.sign().to_bits().hash(&mut h);
    t.echo_center_line.hash(&mut h);
    t.line_order.hash(&mut h);
    match &t.model {
        crate::epi::LineTimeModel::AbsoluteIndex => 0u8.hash(&mut h),
        crate::epi::LineTimeModel::EchoTrain { esp_scale } => {
            1u8.hash(&mut h);
            esp_scale.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value_r(&self, id: Id) -> &RTensor {
        self.nodes[id].value.as_r()
    }

    pub fn value_c(&self, id: Id) -> &CTensor {
        self.nodes[id].value.as_c()
    }

    pub fn requires_grad(&self, id: Id) -> bool {
        self.nodes[id].requires_grad
    }

    fn push(&mut self, op: Op, value: Value, requires_grad: bool) -> Id {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn any_grad(&self, ids: &[Id]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ---- leaves and constants ----

    pub fn leaf_r(&mut self, t: RTensor) -> Id {
        self.push(Op::LeafR, Value::R(t), true)
    }

    pub fn leaf_c(&mut self, t: CTensor) -> Id {
        self.push(Op::LeafC, Value::C(t), true)
    }

    pub fn const_r(&mut self, t: RTensor) -> Id {
        self.push(Op::ConstR, Value::R(t), false)
    }

    pub fn const_c(&mut self, t: CTensor) -> Id {
        self.push(Op::ConstC, Value::C(t), false)
    }

    pub fn scalar(&mut self, v: f64) -> Id {
        self.const_r(RTensor::from_vec(&[1], vec![v]))
    }

    pub fn leaf_scalar(&mut self, v: f64) -> Id {
        self.leaf_r(RTensor::from_vec(&[1], vec![v]))
    }

    pub fn scalar_value(&self, id: Id) -> f64 {
        let t = self.value_r(id);
        assert_eq!(t.len(), 1, "expected scalar node");
        t.data[0]
    }

    // ---- complex ops ----

    pub fn add_c(&mut self, a: Id, b: Id) -> Id {
        let v = self.value_c(a).add(self.value_c(b));
        let g = self.any_grad(&[a, b]);
        self.push(Op::AddC(a, b), Value::C(v), g)
    }

    pub fn sub_c(&mut self, a: Id, b: Id) -> Id {
        let v = self.value_c(a).sub(self.value_c(b));
        let g = self.any_grad(&[a, b]);
        self.push(Op::SubC(a, b), Value::C(v), g)
    }

    pub fn add_many_c(&mut self, ids: &[Id]) -> Id {
        assert!(!ids.is_empty());
        let mut v = self.value_c(ids[0]).clone();
        for &i in &ids[1..] {
            v = v.add(self.value_c(i));
        }
        let g = self.any_grad(ids);
        self.push(Op::AddManyC(ids.to_vec()), Value::C(v), g)
    }

    pub fn scale_c(&mut self, a: Id, s: f64) -> Id {
        let v = self.value_c(a).scale(s);
        let g = self.any_grad(&[a]);
        self.push(Op::ScaleC(a, s), Value::C(v), g)
    }

    pub fn axpy_c(&mut self, a: Id, s: Id, b: Id) -> Id {
        let sv = self.scalar_value(s);
        let av = self.value_c(a);
        let bv = self.value_c(b);
        assert_eq!(av.shape, bv.shape);
        let data = av
            .data
            .iter()
            .zip(&bv.data)
            .map(|(x, y)| x + y * sv)
            .collect();
        let v = CTensor::from_vec(&av.shape.clone(), data);
        let g = self.any_grad(&[a, s, b]);
        self.push(Op::AxpyC { a, s, b }, Value::C(v), g)
    }

    pub fn cmul_const(&mut self, a: Id, w: Rc<CTensor>) -> Id {
        let v = self.value_c(a).mul(&w);
        let g = self.any_grad(&[a]);
        self.push(Op::CMulConst(a, w), Value::C(v), g)
    }

    pub fn conj_c(&mut self, a: Id) -> Id {
        let v = self.value_c(a).conj();
        let g = self.any_grad(&[a]);
        self.push(Op::ConjC(a), Value::C(v), g)
    }

    pub fn mask_mul_c(&mut self, a: Id, m: Rc<RTensor>) -> Id {
        let av = self.value_c(a);
        let v = mask_apply(av, &m);
        let g = self.any_grad(&[a]);
        self.push(Op::MaskMulC(a, m), Value::C(v), g)
    }

    pub fn coil_mul(&mut self, x: Id, coils: Rc<CTensor>) -> Id {
        let xv = self.value_c(x);
        assert_eq!(xv.shape, coils.shape[1..]);
        let plane = xv.len();
        let nc = coils.shape[0];
        let mut data = Vec::with_capacity(nc * plane);
        for c in 0..nc {
            for i in 0..plane {
                data.push(coils.data[c * plane + i] * xv.data[i]);
            }
        }
        let v = CTensor::from_vec(&coils.shape.clone(), data);
        let g = self.any_grad(&[x]);
        self.push(Op::CoilMul(x, coils), Value::C(v), g)
    }

    pub fn coil_combine(&mut self, y: Id, coils: Rc<CTensor>) -> Id {
        let yv = self.value_c(y);
        assert_eq!(yv.shape, coils.shape);
        let v = coil_combine_kernel(yv, &coils);
        let g = self.any_grad(&[y]);
        self.push(Op::CoilCombine(y, coils), Value::C(v), g)
    }

    pub fn fft2c(&mut self, a: Id) -> Id {
        let v = fft2c_unchecked(self.value_c(a), false);
        let g = self.any_grad(&[a]);
        self.push(Op::Fft2C(a), Value::C(v), g)
    }

    pub fn ifft2c(&mut self, a: Id) -> Id {
        let v = fft2c_unchecked(self.value_c(a), true);
        let g = self.any_grad(&[a]);
        self.push(Op::Ifft2C(a), Value::C(v), g)
    }

    fn line_phases(&mut self, field: Id, timing: &EpiTiming) -> Rc<LinePhases> {
        let key = (field, timing_key(timing));
        if let Some(ph) = self.phases.get(&key) {
            return ph.clone();
        }
        let ph = Rc::new(LinePhases::build(self.value_r(field), timing));
        self.phases.insert(key, ph.clone());
        ph
    }

    pub fn offres_fwd(
        &mut self,
        x: Id,
        field: Id,
        timing: &EpiTiming,
        lines: Rc<Vec<usize>>,
    ) -> Id {
        let ph = self.line_phases(field, timing);
        let v = offres_fwd_kernel(self.value_c(x), &ph, &lines);
        let g = self.any_grad(&[x, field]);
        self.push(Op::OffresFwd { x, field, ph, lines }, Value::C(v), g)
    }

    pub fn offres_adj(
        &mut self,
        k: Id,
        field: Id,
        timing: &EpiTiming,
        lines: Rc<Vec<usize>>,
    ) -> Id {
        let ph = self.line_phases(field, timing);
        let v = offres_adj_kernel(self.value_c(k), &ph, &lines);
        let g = self.any_grad(&[k, field]);
        self.push(Op::OffresAdj { k, field, ph, lines }, Value::C(v), g)
    }

    pub fn vc_augment(&mut self, x: Id) -> Id {
        let v = crate::epi::vc_augment(self.value_c(x));
        let g = self.any_grad(&[x]);
        self.push(Op::VcAugment(x), Value::C(v), g)
    }

    pub fn vc_reduce(&mut self, s: Id) -> Id {
        let v = crate::epi::vc_reduce(self.value_c(s)).expect("vc stack shape");
        let g = self.any_grad(&[s]);
        self.push(Op::VcReduce(s), Value::C(v), g)
    }

    pub fn c_to_planes(&mut self, x: Id) -> Id {
        let xv = self.value_c(x);
        assert_eq!(xv.shape.len(), 3);
        let (c, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2]);
        let plane = h * w;
        let mut data = vec![0.0; 2 * c * plane];
        for ch in 0..c {
            for i in 0..plane {
                let z = xv.data[ch * plane + i];
                data[(2 * ch) * plane + i] = z.re;
                data[(2 * ch + 1) * plane + i] = z.im;
            }
        }
        let v = RTensor::from_vec(&[2 * c, h, w], data);
        let g = self.any_grad(&[x]);
        self.push(Op::CToPlanes(x), Value::R(v), g)
    }

    pub fn planes_to_c(&mut self, p: Id) -> Id {
        let pv = self.value_r(p);
        assert_eq!(pv.shape.len(), 3);
        assert_eq!(pv.shape[0] % 2, 0);
        let (c2, h, w) = (pv.shape[0], pv.shape[1], pv.shape[2]);
        let plane = h * w;
        let c = c2 / 2;
        let mut data = vec![Complex64::new(0.0, 0.0); c * plane];
        for ch in 0..c {
            for i in 0..plane {
                data[ch * plane + i] = Complex64::new(
                    pv.data[(2 * ch) * plane + i],
                    pv.data[(2 * ch + 1) * plane + i],
                );
            }
        }
        let v = CTensor::from_vec(&[c, h, w], data);
        let g = self.any_grad(&[p]);
        self.push(Op::PlanesToC(p), Value::C(v), g)
    }

    pub fn mag_c(&mut self, x: Id) -> Id {
        let v = self.value_c(x).magnitude();
        let g = self.any_grad(&[x]);
        self.push(Op::MagC(x), Value::R(v), g)
    }

    pub fn sq_norm_c(&mut self, x: Id) -> Id {
        let v: f64 = self.value_c(x).data.iter().map(|z| z.norm_sqr()).sum();
        let g = self.any_grad(&[x]);
        self.push(Op::SqNormC(x), Value::R(RTensor::from_vec(&[1], vec![v])), g)
    }

    pub fn l1_norm_c(&mut self, x: Id) -> Id {
        let v: f64 = self.value_c(x).data.iter().map(|z| z.norm()).sum();
        let g = self.any_grad(&[x]);
        self.push(Op::L1NormC(x), Value::R(RTensor::from_vec(&[1], vec![v])), g)
    }

    pub fn dot_re_c(&mut self, a: Id, b: Id) -> Id {
        let v = self.value_c(a).dot_re(self.value_c(b));
        let g = self.any_grad(&[a, b]);
        self.push(
            Op::DotReC(a, b),
            Value::R(RTensor::from_vec(&[1], vec![v])),
            g,
        )
    }

    // ---- real ops ----

    pub fn add_r(&mut self, a: Id, b: Id) -> Id {
        let v = self.value_r(a).add(self.value_r(b));
        let g = self.any_grad(&[a, b]);
        self.push(Op::AddR(a, b), Value::R(v), g)
    }

    pub fn sub_r(&mut self, a: Id, b: Id) -> Id {
        let v = self.value_r(a).sub(self.value_r(b));
        let g = self.any_grad(&[a, b]);
        self.push(Op::SubR(a, b), Value::R(v), g)
    }

    pub fn add_many_r(&mut self, ids: &[Id]) -> Id {
        assert!(!ids.is_empty());
        let mut v = self.value_r(ids[0]).clone();
        for &i in &ids[1..] {
            v = v.add(self.value_r(i));
        }
        let g = self.any_grad(ids);
        self.push(Op::AddManyR(ids.to_vec()), Value::R(v), g)
    }

    pub fn scale_r(&mut self, a: Id, s: f64) -> Id {
        let v = self.value_r(a).scale(s);
        let g = self.any_grad(&[a]);
        self.push(Op::ScaleR(a, s), Value::R(v), g)
    }

    pub fn mul_r(&mut self, a: Id, b: Id) -> Id {
        let av = self.value_r(a);
        let bv = self.value_r(b);
        assert_eq!(av.shape, bv.shape);
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let v = RTensor::from_vec(&av.shape.clone(), data);
        let g = self.any_grad(&[a, b]);
        self.push(Op::MulR(a, b), Value::R(v), g)
    }

    pub fn sub_const_r(&mut self, a: Id, c: Rc<RTensor>) -> Id {
        let v = self.value_r(a).sub(&c);
        let g = self.any_grad(&[a]);
        self.push(Op::SubConstR(a), Value::R(v), g)
    }

    pub fn relu(&mut self, a: Id) -> Id {
        let av = self.value_r(a);
        let data = av.data.iter().map(|&v| v.max(0.0)).collect();
        let v = RTensor::from_vec(&av.shape.clone(), data);
        let g = self.any_grad(&[a]);
        self.push(Op::Relu(a), Value::R(v), g)
    }

    pub fn tanh(&mut self, a: Id) -> Id {
        let av = self.value_r(a);
        let data = av.data.iter().map(|&v| v.tanh()).collect();
        let v = RTensor::from_vec(&av.shape.clone(), data);
        let g = self.any_grad(&[a]);
        self.push(Op::Tanh(a), Value::R(v), g)
    }

    pub fn conv2d(&mut self, x: Id, w: Id, b: Id) -> Id {
        let v = nn::conv2d_fwd(self.value_r(x), self.value_r(w), self.value_r(b));
        let g = self.any_grad(&[x, w, b]);
        self.push(Op::Conv2d { x, w, b }, Value::R(v), g)
    }

    pub fn linear(&mut self, x: Id, w: Id, b: Id) -> Id {
        let v = nn::linear_fwd(self.value_r(x), self.value_r(w), self.value_r(b));
        let g = self.any_grad(&[x, w, b]);
        self.push(Op::Linear { x, w, b }, Value::R(v), g)
    }

    pub fn concat_ch(&mut self, ids: &[Id]) -> Id {
        assert!(!ids.is_empty());
        let first = self.value_r(ids[0]);
        let (h, w) = (first.shape[1], first.shape[2]);
        let mut data = Vec::new();
        let mut channels = 0;
        for &i in ids {
            let t = self.value_r(i);
            assert_eq!(&t.shape[1..], [h, w]);
            channels += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let v = RTensor::from_vec(&[channels, h, w], data);
        let g = self.any_grad(ids);
        self.push(Op::ConcatCh(ids.to_vec()), Value::R(v), g)
    }

    pub fn concat_cols(&mut self, ids: &[Id]) -> Id {
        assert!(!ids.is_empty());
        let n = self.value_r(ids[0]).shape[0];
        let widths: Vec<usize> = ids.iter().map(|&i| self.value_r(i).shape[1]).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; n * total];
        let mut off = 0;
        for (idx, &i) in ids.iter().enumerate() {
            let t = self.value_r(i);
            assert_eq!(t.shape[0], n);
            let w = widths[idx];
            for r in 0..n {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&t.data[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let v = RTensor::from_vec(&[n, total], data);
        let g = self.any_grad(ids);
        self.push(Op::ConcatCols(ids.to_vec()), Value::R(v), g)
    }

    pub fn chw_to_rows(&mut self, x: Id) -> Id {
        let xv = self.value_r(x);
        assert_eq!(xv.shape.len(), 3);
        let (c, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2]);
        let plane = h * w;
        let mut data = vec![0.0; plane * c];
        for ch in 0..c {
            for i in 0..plane {
                data[i * c + ch] = xv.data[ch * plane + i];
            }
        }
        let v = RTensor::from_vec(&[plane, c], data);
        let g = self.any_grad(&[x]);
        self.push(Op::ChwToRows(x), Value::R(v), g)
    }

    pub fn rows_to_image(&mut self, x: Id, h: usize, w: usize) -> Id {
        let xv = self.value_r(x);
        assert_eq!(xv.shape, [h * w, 1]);
        let v = RTensor::from_vec(&[h, w], xv.data.clone());
        let g = self.any_grad(&[x]);
        self.push(Op::RowsToImage(x, h, w), Value::R(v), g)
    }

    pub fn sum_r(&mut self, x: Id) -> Id {
        let v: f64 = self.value_r(x).data.iter().sum();
        let g = self.any_grad(&[x]);
        self.push(Op::SumR(x), Value::R(RTensor::from_vec(&[1], vec![v])), g)
    }

    pub fn sq_norm_r(&mut self, x: Id) -> Id {
        let v: f64 = self.value_r(x).data.iter().map(|&v| v * v).sum();
        let g = self.any_grad(&[x]);
        self.push(Op::SqNormR(x), Value::R(RTensor::from_vec(&[1], vec![v])), g)
    }

    pub fn l1_norm_r(&mut self, x: Id) -> Id {
        let v: f64 = self.value_r(x).data.iter().map(|&v| v.abs()).sum();
        let g = self.any_grad(&[x]);
        self.push(Op::L1NormR(x), Value::R(RTensor::from_vec(&[1], vec![v])), g)
    }

    pub fn grad_y(&mut self, x: Id) -> Id {
        let (gy, _) = crate::numerics::grad2(self.value_r(x));
        let g = self.any_grad(&[x]);
        self.push(Op::GradY(x), Value::R(gy), g)
    }

    pub fn grad_x(&mut self, x: Id) -> Id {
        let (_, gx) = crate::numerics::grad2(self.value_r(x));
        let g = self.any_grad(&[x]);
        self.push(Op::GradX(x), Value::R(gx), g)
    }

    pub fn smul(&mut self, a: Id, b: Id) -> Id {
        let v = self.scalar_value(a) * self.scalar_value(b);
        let g = self.any_grad(&[a, b]);
        self.push(Op::SMul(a, b), Value::R(RTensor::from_vec(&[1], vec![v])), g)
    }

    pub fn sdiv(&mut self, a: Id, b: Id) -> Id {
        let v = self.scalar_value(a) / self.scalar_value(b);
        let g = self.any_grad(&[a, b]);
        self.push(Op::SDiv(a, b), Value::R(RTensor::from_vec(&[1], vec![v])), g)
    }

    pub fn ssqrt(&mut self, a: Id) -> Id {
        let v = self.scalar_value(a).sqrt();
        let g = self.any_grad(&[a]);
        self.push(Op::SSqrt(a), Value::R(RTensor::from_vec(&[1], vec![v])), g)
    }

    pub fn sadd_const(&mut self, a: Id, c: f64) -> Id {
        let v = self.scalar_value(a) + c;
        let g = self.any_grad(&[a]);
        self.push(
            Op::SAddConst(a),
            Value::R(RTensor::from_vec(&[1], vec![v])),
            g,
        )
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss node. Gradients are only produced
    /// for nodes on a differentiable path to a leaf.
    pub fn backward(&self, loss: Id) -> Grads {
        let lt = self.value_r(loss);
        assert_eq!(lt.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Value>> = (0..=loss).map(|_| None).collect();
        grads[loss] = Some(Value::R(RTensor::from_vec(&[1], vec![1.0])));

        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(id, &g, &mut grads);
            // keep leaf gradients, free the rest
            match self.nodes[id].op {
                Op::LeafR | Op::LeafC => grads[id] = Some(g),
                _ => {}
            }
        }
        Grads { inner: grads }
    }

    fn add_grad_r(&self, grads: &mut [Option<Value>], id: Id, delta: RTensor) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(Value::R(t)) => {
                for (a, b) in t.data.iter_mut().zip(&delta.data) {
                    *a += b;
                }
            }
            None => grads[id] = Some(Value::R(delta)),
            _ => panic!("gradient kind mismatch"),
        }
    }

    fn add_grad_c(&self, grads: &mut [Option<Value>], id: Id, delta: CTensor) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(Value::C(t)) => {
                for (a, b) in t.data.iter_mut().zip(&delta.data) {
                    *a += b;
                }
            }
            None => grads[id] = Some(Value::C(delta)),
            _ => panic!("gradient kind mismatch"),
        }
    }

    fn accumulate(&self, id: Id, g: &Value, grads: &mut [Option<Value>]) {
        match &self.nodes[id].op {
            Op::LeafR | Op::LeafC | Op::ConstR | Op::ConstC => {}
            Op::AddC(a, b) => {
                let gc = g.as_c();
                self.add_grad_c(grads, *a, gc.clone());
                self.add_grad_c(grads, *b, gc.clone());
            }
            Op::SubC(a, b) => {
                let gc = g.as_c();
                self.add_grad_c(grads, *a, gc.clone());
                self.add_grad_c(grads, *b, gc.scale(-1.0));
            }
            Op::AddManyC(ids) => {
                let gc = g.as_c();
                for &i in ids {
                    self.add_grad_c(grads, i, gc.clone());
                }
            }
            Op::ScaleC(a, s) => {
                self.add_grad_c(grads, *a, g.as_c().scale(*s));
            }
            Op::AxpyC { a, s, b } => {
                let gc = g.as_c();
                self.add_grad_c(grads, *a, gc.clone());
                let sv = self.scalar_value(*s);
                self.add_grad_c(grads, *b, gc.scale(sv));
                if self.nodes[*s].requires_grad {
                    let ds = self.value_c(*b).dot_re(gc);
                    self.add_grad_r(grads, *s, RTensor::from_vec(&[1], vec![ds]));
                }
            }
            Op::CMulConst(a, w) => {
                self.add_grad_c(grads, *a, w.conj().mul(g.as_c()));
            }
            Op::ConjC(a) => {
                self.add_grad_c(grads, *a, g.as_c().conj());
            }
            Op::MaskMulC(a, m) => {
                self.add_grad_c(grads, *a, mask_apply(g.as_c(), m));
            }
            Op::CoilMul(x, coils) => {
                self.add_grad_c(grads, *x, coil_combine_kernel(g.as_c(), coils));
            }
            Op::CoilCombine(y, coils) => {
                let gc = g.as_c();
                let plane = gc.len();
                let nc = coils.shape[0];
                let mut delta = CTensor::zeros(&coils.shape);
                for c in 0..nc {
                    for i in 0..plane {
                        delta.data[c * plane + i] = coils.data[c * plane + i] * gc.data[i];
                    }
                }
                self.add_grad_c(grads, *y, delta);
            }
            Op::Fft2C(a) => {
                self.add_grad_c(grads, *a, fft2c_unchecked(g.as_c(), true));
            }
            Op::Ifft2C(a) => {
                self.add_grad_c(grads, *a, fft2c_unchecked(g.as_c(), false));
            }
            Op::OffresFwd { x, field, ph, lines } => {
                let gc = g.as_c();
                self.add_grad_c(grads, *x, offres_adj_kernel(gc, ph, lines));
                if self.nodes[*field].requires_grad {
                    let mut df = RTensor::zeros(&self.value_r(*field).shape);
                    offres_fwd_field_grad(self.value_c(*x), gc, ph, lines, &mut df);
                    self.add_grad_r(grads, *field, df);
                }
            }
            Op::OffresAdj { k, field, ph, lines } => {
                let gc = g.as_c();
                self.add_grad_c(grads, *k, offres_fwd_kernel(gc, ph, lines));
                if self.nodes[*field].requires_grad {
                    let mut df = RTensor::zeros(&self.value_r(*field).shape);
                    offres_adj_field_grad(self.value_c(*k), gc, ph, lines, &mut df);
                    self.add_grad_r(grads, *field, df);
                }
            }
            Op::VcAugment(x) => {
                let gc = g.as_c();
                let plane = gc.len() / 2;
                let shape = self.value_c(*x).shape.clone();
                let data = (0..plane)
                    .map(|i| gc.data[i] + gc.data[plane + i].conj())
                    .collect();
                self.add_grad_c(grads, *x, CTensor::from_vec(&shape, data));
            }
            Op::VcReduce(s) => {
                let gc = g.as_c();
                let plane = gc.len();
                let shape = self.value_c(*s).shape.clone();
                let mut data = Vec::with_capacity(2 * plane);
                data.extend(gc.data.iter().map(|v| v * 0.5));
                data.extend(gc.data.iter().map(|v| v.conj() * 0.5));
                self.add_grad_c(grads, *s, CTensor::from_vec(&shape, data));
            }
            Op::CToPlanes(x) => {
                let gr = g.as_r();
                let shape = self.value_c(*x).shape.clone();
                let plane = shape[1] * shape[2];
                let c = shape[0];
                let mut data = vec![Complex64::new(0.0, 0.0); c * plane];
                for ch in 0..c {
                    for i in 0..plane {
                        data[ch * plane + i] = Complex64::new(
                            gr.data[(2 * ch) * plane + i],
                            gr.data[(2 * ch + 1) * plane + i],
                        );
                    }
                }
                self.add_grad_c(grads, *x, CTensor::from_vec(&shape, data));
            }
            Op::PlanesToC(p) => {
                let gc = g.as_c();
                let shape = self.value_r(*p).shape.clone();
                let plane = shape[1] * shape[2];
                let c = shape[0] / 2;
                let mut data = vec![0.0; 2 * c * plane];
                for ch in 0..c {
                    for i in 0..plane {
                        data[(2 * ch) * plane + i] = gc.data[ch * plane + i].re;
                        data[(2 * ch + 1) * plane + i] = gc.data[ch * plane + i].im;
                    }
                }
                self.add_grad_r(grads, *p, RTensor::from_vec(&shape, data));
            }
            Op::MagC(x) => {
                let gr = g.as_r();
                let xv = self.value_c(*x);
                let data = xv
                    .data
                    .iter()
                    .zip(&gr.data)
                    .map(|(z, &gm)| {
                        let m = z.norm();
                        if m > 1e-300 {
                            z * (gm / m)
                        } else {
                            Complex64::new(0.0, 0.0)
                        }
                    })
                    .collect();
                self.add_grad_c(grads, *x, CTensor::from_vec(&xv.shape.clone(), data));
            }
            Op::SqNormC(x) => {
                let gs = g.as_r().data[0];
                self.add_grad_c(grads, *x, self.value_c(*x).scale(2.0 * gs));
            }
            Op::L1NormC(x) => {
                let gs = g.as_r().data[0];
                let xv = self.value_c(*x);
                let data = xv
                    .data
                    .iter()
                    .map(|z| {
                        let m = z.norm();
                        if m > 1e-300 {
                            z * (gs / m)
                        } else {
                            Complex64::new(0.0, 0.0)
                        }
                    })
                    .collect();
                self.add_grad_c(grads, *x, CTensor::from_vec(&xv.shape.clone(), data));
            }
            Op::DotReC(a, b) => {
                let gs = g.as_r().data[0];
                self.add_grad_c(grads, *a, self.value_c(*b).scale(gs));
                self.add_grad_c(grads, *b, self.value_c(*a).scale(gs));
            }
            Op::AddR(a, b) => {
                let gr = g.as_r();
                self.add_grad_r(grads, *a, gr.clone());
                self.add_grad_r(grads, *b, gr.clone());
            }
            Op::SubR(a, b) => {
                let gr = g.as_r();
                self.add_grad_r(grads, *a, gr.clone());
                self.add_grad_r(grads, *b, gr.scale(-1.0));
            }
            Op::AddManyR(ids) => {
                let gr = g.as_r();
                for &i in ids {
                    self.add_grad_r(grads, i, gr.clone());
                }
            }
            Op::ScaleR(a, s) => {
                self.add_grad_r(grads, *a, g.as_r().scale(*s));
            }
            Op::MulR(a, b) => {
                let gr = g.as_r();
                let av = self.value_r(*a);
                let bv = self.value_r(*b);
                let da = RTensor::from_vec(
                    &av.shape.clone(),
                    gr.data.iter().zip(&bv.data).map(|(g, b)| g * b).collect(),
                );
                let db = RTensor::from_vec(
                    &av.shape.clone(),
                    gr.data.iter().zip(&av.data).map(|(g, a)| g * a).collect(),
                );
                self.add_grad_r(grads, *a, da);
                self.add_grad_r(grads, *b, db);
            }
            Op::SubConstR(a) => {
                self.add_grad_r(grads, *a, g.as_r().clone());
            }
            Op::Relu(a) => {
                let gr = g.as_r();
                let av = self.value_r(*a);
                let data = av
                    .data
                    .iter()
                    .zip(&gr.data)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                self.add_grad_r(grads, *a, RTensor::from_vec(&av.shape.clone(), data));
            }
            Op::Tanh(a) => {
                let gr = g.as_r();
                let yv = self.nodes[id].value.as_r();
                let data = yv
                    .data
                    .iter()
                    .zip(&gr.data)
                    .map(|(&y, &g)| g * (1.0 - y * y))
                    .collect();
                self.add_grad_r(grads, *a, RTensor::from_vec(&yv.shape.clone(), data));
            }
            Op::Conv2d { x, w, b } => {
                let gr = g.as_r();
                let xv = self.value_r(*x);
                let wv = self.value_r(*w);
                if self.nodes[*x].requires_grad {
                    self.add_grad_r(grads, *x, nn::conv2d_bwd_input(gr, wv, &xv.shape));
                }
                if self.nodes[*w].requires_grad {
                    self.add_grad_r(grads, *w, nn::conv2d_bwd_weight(gr, xv, &wv.shape));
                }
                if self.nodes[*b].requires_grad {
                    self.add_grad_r(grads, *b, nn::conv2d_bwd_bias(gr));
                }
            }
            Op::Linear { x, w, b } => {
                let gr = g.as_r();
                let xv = self.value_r(*x);
                let wv = self.value_r(*w);
                if self.nodes[*x].requires_grad {
                    self.add_grad_r(grads, *x, nn::linear_bwd_input(gr, wv));
                }
                if self.nodes[*w].requires_grad {
                    self.add_grad_r(grads, *w, nn::linear_bwd_weight(gr, xv));
                }
                if self.nodes[*b].requires_grad {
                    self.add_grad_r(grads, *b, nn::linear_bwd_bias(gr));
                }
            }
            Op::ConcatCh(ids) => {
                let gr = g.as_r();
                let (h, w) = (gr.shape[1], gr.shape[2]);
                let mut off = 0;
                for &i in ids {
                    let c = self.value_r(i).shape[0];
                    let slice = gr.data[off * h * w..(off + c) * h * w].to_vec();
                    self.add_grad_r(grads, i, RTensor::from_vec(&[c, h, w], slice));
                    off += c;
                }
            }
            Op::ConcatCols(ids) => {
                let gr = g.as_r();
                let n = gr.shape[0];
                let total = gr.shape[1];
                let mut off = 0;
                for &i in ids {
                    let w = self.value_r(i).shape[1];
                    let mut data = vec![0.0; n * w];
                    for r in 0..n {
                        data[r * w..(r + 1) * w]
                            .copy_from_slice(&gr.data[r * total + off..r * total + off + w]);
                    }
                    self.add_grad_r(grads, i, RTensor::from_vec(&[n, w], data));
                    off += w;
                }
            }
            Op::ChwToRows(x) => {
                let gr = g.as_r();
                let shape = self.value_r(*x).shape.clone();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let plane = h * w;
                let mut data = vec![0.0; c * plane];
                for ch in 0..c {
                    for i in 0..plane {
                        data[ch * plane + i] = gr.data[i * c + ch];
                    }
                }
                self.add_grad_r(grads, *x, RTensor::from_vec(&shape, data));
            }
            Op::RowsToImage(x, h, w) => {
                let gr = g.as_r();
                self.add_grad_r(
                    grads,
                    *x,
                    RTensor::from_vec(&[h * w, 1], gr.data.clone()),
                );
            }
            Op::SumR(x) => {
                let gs = g.as_r().data[0];
                let shape = self.value_r(*x).shape.clone();
                self.add_grad_r(grads, *x, RTensor::full(&shape, gs));
            }
            Op::SqNormR(x) => {
                let gs = g.as_r().data[0];
                self.add_grad_r(grads, *x, self.value_r(*x).scale(2.0 * gs));
            }
            Op::L1NormR(x) => {
                let gs = g.as_r().data[0];
                let xv = self.value_r(*x);
                let data = xv.data.iter().map(|&v| gs * sign(v)).collect();
                self.add_grad_r(grads, *x, RTensor::from_vec(&xv.shape.clone(), data));
            }
            Op::GradY(x) => {
                let gr = g.as_r();
                let (ny, nx) = (gr.shape[0], gr.shape[1]);
                let mut d = RTensor::zeros(&gr.shape);
                for i in 0..ny - 1 {
                    for j in 0..nx {
                        let gv = gr.at2(i, j);
                        *d.at2_mut(i + 1, j) += gv;
                        *d.at2_mut(i, j) -= gv;
                    }
                }
                self.add_grad_r(grads, *x, d);
            }
            Op::GradX(x) => {
                let gr = g.as_r();
                let (ny, nx) = (gr.shape[0], gr.shape[1]);
                let mut d = RTensor::zeros(&gr.shape);
                for i in 0..ny {
                    for j in 0..nx - 1 {
                        let gv = gr.at2(i, j);
                        *d.at2_mut(i, j + 1) += gv;
                        *d.at2_mut(i, j) -= gv;
                    }
                }
                self.add_grad_r(grads, *x, d);
            }
            Op::SMul(a, b) => {
                let gs = g.as_r().data[0];
                let av = self.scalar_value(*a);
                let bv = self.scalar_value(*b);
                self.add_grad_r(grads, *a, RTensor::from_vec(&[1], vec![gs * bv]));
                self.add_grad_r(grads, *b, RTensor::from_vec(&[1], vec![gs * av]));
            }
            Op::SDiv(a, b) => {
                let gs = g.as_r().data[0];
                let av = self.scalar_value(*a);
                let bv = self.scalar_value(*b);
                self.add_grad_r(grads, *a, RTensor::from_vec(&[1], vec![gs / bv]));
                self.add_grad_r(
                    grads,
                    *b,
                    RTensor::from_vec(&[1], vec![-gs * av / (bv * bv)]),
                );
            }
            Op::SSqrt(a) => {
                let gs = g.as_r().data[0];
                let y = self.nodes[id].value.as_r().data[0];
                let d = if y > 1e-300 { gs / (2.0 * y) } else { 0.0 };
                self.add_grad_r(grads, *a, RTensor::from_vec(&[1], vec![d]));
            }
            Op::SAddConst(a) => {
                self.add_grad_r(grads, *a, g.as_r().clone());
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn mask_apply(a: &CTensor, m: &RTensor) -> CTensor {
    let plane = m.len();
    assert_eq!(a.len() % plane, 0, "mask must tile the tensor");
    let batch = a.len() / plane;
    let mut out = a.clone();
    for b in 0..batch {
        for i in 0..plane {
            out.data[b * plane + i] *= m.data[i];
        }
    }
    out
}

fn coil_combine_kernel(y: &CTensor, coils: &CTensor) -> CTensor {
    let nc = coils.shape[0];
    let plane: usize = coils.shape[1..].iter().product();
    let mut out = CTensor::zeros(&coils.shape[1..]);
    for c in 0..nc {
        for i in 0..plane {
            out.data[i] += coils.data[c * plane + i].conj() * y.data[c * plane + i];
        }
    }
    out
}
