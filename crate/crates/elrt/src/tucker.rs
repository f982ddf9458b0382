//! The Tucker-2 convolutional layer: factor matrices U1/U2 plus a small core
//! tensor, its three-stage forward pass, and dense-kernel reconstruction.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{conv2d_batched, xavier_uniform_init, ConvGeometry, Tensor};

/// Factorized convolution `{U1, G, U2}` with U1 of shape `(Phi1, C_in)`,
/// core `(Phi1, Phi2, K, K)` and U2 of shape `(Phi2, C_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tucker2Conv<T: Scalar> {
    pub u1: Tensor<T>,
    pub core_g: Tensor<T>,
    pub u2: Tensor<T>,
    pub geom: ConvGeometry,
    pub name: String,
}

/// Plain dense convolution with weight `(C_in, C_out, K, K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseConv<T: Scalar> {
    pub w: Tensor<T>,
    pub geom: ConvGeometry,
    pub name: String,
}

impl<T: Scalar> DenseConv<T> {
    pub fn param_count(&self) -> usize {
        self.geom.c_in * self.geom.c_out * self.geom.k * self.geom.k
    }
}

pub fn check_rank_bounds(geom: &ConvGeometry, phi1: usize, phi2: usize) -> Result<()> {
    let phi1_max = geom.c_in * geom.k * geom.k;
    if phi1 == 0 || phi1 > phi1_max {
        return Err(Error::Config(format!(
            "rank Phi1={phi1} outside [1, {phi1_max}] for C_in={}, K={}",
            geom.c_in, geom.k
        )));
    }
    if phi2 == 0 || phi2 > geom.c_out {
        return Err(Error::Config(format!(
            "rank Phi2={phi2} outside [1, {}]",
            geom.c_out
        )));
    }
    Ok(())
}

impl<T: Scalar> Tucker2Conv<T> {
    pub fn from_parts(
        u1: Tensor<T>,
        core_g: Tensor<T>,
        u2: Tensor<T>,
        geom: ConvGeometry,
        name: impl Into<String>,
    ) -> Result<Self> {
        let (phi1, phi2) = (u1.shape()[0], u2.shape()[0]);
        check_rank_bounds(&geom, phi1, phi2)?;
        if u1.shape() != [phi1, geom.c_in] {
            return Err(Error::Shape(format!("U1 shape {:?}", u1.shape())));
        }
        if u2.shape() != [phi2, geom.c_out] {
            return Err(Error::Shape(format!("U2 shape {:?}", u2.shape())));
        }
        if core_g.shape() != [phi1, phi2, geom.k, geom.k] {
            return Err(Error::Shape(format!("core shape {:?}", core_g.shape())));
        }
        Ok(Self {
            u1,
            core_g,
            u2,
            geom,
            name: name.into(),
        })
    }

    /// Xavier-initialized layer; fans are U1 (C_in, Phi1), U2 (Phi2, C_out)
    /// and core (Phi1*K^2, Phi2*K^2). Deterministic per seed.
    pub fn init(
        geom: ConvGeometry,
        phi1: usize,
        phi2: usize,
        seed: u64,
        name: impl Into<String>,
    ) -> Result<Self> {
        check_rank_bounds(&geom, phi1, phi2)?;
        let k2 = geom.k * geom.k;
        let u1 = xavier_uniform_init(&[phi1, geom.c_in], geom.c_in, phi1, seed)?;
        let core_g = xavier_uniform_init(
            &[phi1, phi2, geom.k, geom.k],
            phi1 * k2,
            phi2 * k2,
            seed.wrapping_add(1),
        )?;
        let u2 = xavier_uniform_init(&[phi2, geom.c_out], phi2, geom.c_out, seed.wrapping_add(2))?;
        Self::from_parts(u1, core_g, u2, geom, name)
    }

    pub fn phi1(&self) -> usize {
        self.u1.shape()[0]
    }

    pub fn phi2(&self) -> usize {
        self.u2.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.u1.len() + self.core_g.len() + self.u2.len()
    }

    /// Geometry of the first 1x1 stage (C_in -> Phi1, stride 1, pad 0).
    pub fn stage1_geom(&self) -> ConvGeometry {
        ConvGeometry::new(
            self.geom.c_in,
            self.phi1(),
            1,
            1,
            0,
            self.geom.h_in,
            self.geom.w_in,
        )
        .expect("stage1 geometry")
    }

    /// Geometry of the KxK core stage carrying the layer's stride and padding.
    pub fn stage2_geom(&self) -> ConvGeometry {
        ConvGeometry::new(
            self.phi1(),
            self.phi2(),
            self.geom.k,
            self.geom.stride,
            self.geom.padding,
            self.geom.h_in,
            self.geom.w_in,
        )
        .expect("stage2 geometry")
    }

    /// Geometry of the last 1x1 stage (Phi2 -> C_out).
    pub fn stage3_geom(&self) -> ConvGeometry {
        ConvGeometry::new(
            self.phi2(),
            self.geom.c_out,
            1,
            1,
            0,
            self.geom.h_out,
            self.geom.w_out,
        )
        .expect("stage3 geometry")
    }

    /// U1 as a 1x1 conv weight `(C_in, Phi1, 1, 1)`; transposed because the
    /// first stage contracts the input-channel axis.
    pub fn u1_as_conv_weight(&self) -> Tensor<T> {
        let (phi1, c_in) = (self.phi1(), self.geom.c_in);
        let mut w = Tensor::zeros(&[c_in, phi1, 1, 1]);
        for r1 in 0..phi1 {
            for p in 0..c_in {
                w.set(&[p, r1, 0, 0], self.u1.at(&[r1, p]));
            }
        }
        w
    }

    /// U2 as a 1x1 conv weight `(Phi2, C_out, 1, 1)`; a pure reshape since
    /// the second index of U2 produces output channels.
    pub fn u2_as_conv_weight(&self) -> Tensor<T> {
        self.u2
            .reshape(vec![self.phi2(), self.geom.c_out, 1, 1])
            .expect("u2 reshape")
    }

    /// Factorized forward pass over a `(N, C_in, H, W)` batch: 1x1 contraction
    /// with U1, the KxK core convolution, then the 1x1 expansion with U2.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.ndim() != 4 || x.shape()[1] != self.geom.c_in {
            return Err(Error::Shape(format!(
                "layer {} expects channel extent {}, input is {:?}",
                self.name,
                self.geom.c_in,
                x.shape()
            )));
        }
        let t1 = conv2d_batched(x, &self.u1_as_conv_weight(), &self.stage1_geom());
        let t2 = conv2d_batched(&t1, &self.core_g, &self.stage2_geom());
        Ok(conv2d_batched(&t2, &self.u2_as_conv_weight(), &self.stage3_geom()))
    }

    /// Dense kernel: W[p,q,i,j] = sum_{r1,r2} G[r1,r2,i,j] U1[r1,p] U2[r2,q].
    pub fn reconstruct_kernel(&self) -> Tensor<T> {
        let g = &self.geom;
        let (phi1, phi2) = (self.phi1(), self.phi2());
        let mut w = Tensor::zeros(&[g.c_in, g.c_out, g.k, g.k]);
        for p in 0..g.c_in {
            for q in 0..g.c_out {
                for i in 0..g.k {
                    for j in 0..g.k {
                        let mut acc = T::zero();
                        for r1 in 0..phi1 {
                            let u1v = self.u1.at(&[r1, p]);
                            for r2 in 0..phi2 {
                                acc += self.core_g.at(&[r1, r2, i, j])
                                    * u1v
                                    * self.u2.at(&[r2, q]);
                            }
                        }
                        w.set(&[p, q, i, j], acc);
                    }
                }
            }
        }
        w
    }

    pub fn cast<U: Scalar>(&self) -> Tucker2Conv<U> {
        Tucker2Conv {
            u1: self.u1.cast(),
            core_g: self.core_g.cast(),
            u2: self.u2.cast(),
            geom: self.geom,
            name: self.name.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{conv2d_batched, mse};
    use proptest::prelude::*;

    fn eye(n: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.set(&[i, i], 1.0);
        }
        t
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        xavier_uniform_init(shape, 4, 4, seed).unwrap()
    }

    #[test]
    fn identity_factors_match_dense_conv() {
        let geom = ConvGeometry::new(3, 3, 3, 1, 1, 6, 6).unwrap();
        let core = rand(&[3, 3, 3, 3], 0);
        let layer =
            Tucker2Conv::from_parts(eye(3), core.clone(), eye(3), geom, "t").unwrap();
        let x = rand(&[2, 3, 6, 6], 1);
        let y = layer.forward(&x).unwrap();
        let dense = conv2d_batched(&x, &core, &geom);
        assert!(y.sub(&dense).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn zero_core_gives_zero_output() {
        let geom = ConvGeometry::new(3, 4, 3, 1, 1, 5, 5).unwrap();
        let mut layer = Tucker2Conv::init(geom, 2, 2, 3, "t").unwrap();
        layer.core_g = Tensor::zeros(layer.core_g.shape());
        let y = layer.forward(&rand(&[1, 3, 5, 5], 4)).unwrap();
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn rank1_reconstruction() {
        let geom = ConvGeometry::new(3, 4, 2, 1, 0, 4, 4).unwrap();
        let mut u1 = Tensor::zeros(&[1, 3]);
        u1.set(&[0, 0], 1.0);
        let mut u2 = Tensor::zeros(&[1, 4]);
        u2.set(&[0, 0], 1.0);
        let g = rand(&[1, 1, 2, 2], 5);
        let layer = Tucker2Conv::from_parts(u1, g.clone(), u2, geom, "t").unwrap();
        let w = layer.reconstruct_kernel();
        for p in 0..3 {
            for q in 0..4 {
                for i in 0..2 {
                    for j in 0..2 {
                        let expect = if p == 0 && q == 0 { g.at(&[0, 0, i, j]) } else { 0.0 };
                        assert_eq!(w.at(&[p, q, i, j]), expect);
                    }
                }
            }
        }
    }

    #[test]
    fn reconstruction_matches_quadruple_loop() {
        let geom = ConvGeometry::new(3, 4, 3, 1, 1, 4, 4).unwrap();
        let layer = Tucker2Conv::<f64>::init(geom, 2, 3, 7, "t").unwrap();
        let w = layer.reconstruct_kernel();
        for p in 0..3 {
            for q in 0..4 {
                for i in 0..3 {
                    for j in 0..3 {
                        let mut acc = 0.0;
                        for r1 in 0..2 {
                            for r2 in 0..3 {
                                acc += layer.core_g.at(&[r1, r2, i, j])
                                    * layer.u1.at(&[r1, p])
                                    * layer.u2.at(&[r2, q]);
                            }
                        }
                        assert!((w.at(&[p, q, i, j]) - acc).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let geom = ConvGeometry::new(4, 4, 3, 1, 1, 8, 8).unwrap();
        let a = Tucker2Conv::<f64>::init(geom, 4, 4, 11, "t").unwrap();
        let b = Tucker2Conv::init(geom, 4, 4, 11, "t").unwrap();
        assert_eq!(a, b);
        let bound = (6.0f64 / 8.0).sqrt();
        assert!(a.u1.data().iter().all(|v| v.abs() <= bound));
        let y = a.forward(&Tensor::filled(&[1, 4, 8, 8], 1.0)).unwrap();
        assert!(!y.has_non_finite());
    }

    #[test]
    fn rank_bounds_enforced() {
        let geom = ConvGeometry::new(3, 4, 3, 1, 1, 8, 8).unwrap();
        assert!(Tucker2Conv::<f64>::init(geom, 0, 1, 0, "t").is_err());
        assert!(Tucker2Conv::<f64>::init(geom, 28, 1, 0, "t").is_err());
        assert!(Tucker2Conv::<f64>::init(geom, 1, 5, 0, "t").is_err());
        assert!(Tucker2Conv::<f64>::init(geom, 27, 4, 0, "t").is_ok());
    }

    #[test]
    fn param_count_formula() {
        let geom = ConvGeometry::new(5, 7, 3, 1, 1, 8, 8).unwrap();
        let layer = Tucker2Conv::<f64>::init(geom, 3, 4, 0, "t").unwrap();
        assert_eq!(layer.param_count(), 3 * 5 + 3 * 4 * 9 + 4 * 7);
    }

    proptest! {
        /// Factorized forward equals dense convolution with the reconstructed
        /// kernel, over fuzzed shapes, strides and paddings.
        #[test]
        fn forward_reconstruction_equivalence(
            c_in in 1usize..=4, c_out in 1usize..=4, k in 1usize..=3,
            stride in 1usize..=2, padding in 0usize..=1,
            seed in 0u64..500,
        ) {
            let h = 6usize;
            prop_assume!(h + 2 * padding >= k);
            let geom = ConvGeometry::new(c_in, c_out, k, stride, padding, h, h).unwrap();
            let phi1 = 1 + (seed as usize % c_in.max(1));
            let phi2 = 1 + (seed as usize % c_out.max(1));
            let layer = Tucker2Conv::init(geom, phi1.min(c_in * k * k), phi2.min(c_out), seed, "t").unwrap();
            let x = rand(&[2, c_in, h, h], seed + 1);
            let fac = layer.forward(&x).unwrap();
            let dense = conv2d_batched(&x, &layer.reconstruct_kernel(), &geom);
            prop_assert!(fac.sub(&dense).unwrap().max_abs() < 1e-10);
        }

        /// Linearity of the forward map.
        #[test]
        fn forward_linearity(seed in 0u64..100) {
            let geom = ConvGeometry::new(3, 4, 3, 1, 1, 5, 5).unwrap();
            let layer = Tucker2Conv::init(geom, 2, 2, seed, "t").unwrap();
            let x1 = rand(&[1, 3, 5, 5], seed + 1);
            let x2 = rand(&[1, 3, 5, 5], seed + 2);
            let (a, b) = (0.7, -1.3);
            let lhs = layer.forward(&x1.scale(a).add(&x2.scale(b)).unwrap()).unwrap();
            let rhs = layer.forward(&x1).unwrap().scale(a)
                .add(&layer.forward(&x2).unwrap().scale(b)).unwrap();
            prop_assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-10);
        }
    }

    #[test]
    fn forward_reconstruction_equivalence_f32() {
        let geom = ConvGeometry::new(3, 4, 3, 2, 1, 8, 8).unwrap();
        let layer = Tucker2Conv::<f32>::init(geom, 2, 2, 13, "t").unwrap();
        let x: Tensor<f32> = xavier_uniform_init(&[2, 3, 8, 8], 4, 4, 14).unwrap();
        let fac = layer.forward(&x).unwrap();
        let dense = conv2d_batched(&x, &layer.reconstruct_kernel(), &geom);
        assert!(fac.sub(&dense).unwrap().max_abs() < 1e-4);
        assert!(mse(&fac, &dense).unwrap() < 1e-8);
    }
}
