use serde::{Deserialize, Serialize};

use crate::connectivity::{ArchSpec, ConnectivityMask, LayerSpec, Shape};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

use super::network::Network;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    Conv,
    Fc,
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    /// Position in the layer stack.
    pub layer: usize,
    pub kind: CostKind,
    pub weights: u64,
    /// Weights plus bias and batch norm scale/shift.
    pub params: u64,
    pub madds: u64,
    pub active_connections: u64,
    pub possible_connections: u64,
}

/// Parameter and multiply-add counts for one forward pass of one example.
/// `total_params` leaves out the classifier, which is reported on its own.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub total_params: u64,
    pub total_madds: u64,
    pub classifier_params: u64,
}

impl CostReport {
    pub fn conv_params(&self) -> u64 {
        self.layers
            .iter()
            .filter(|l| l.kind == CostKind::Conv)
            .map(|l| l.params)
            .sum()
    }

    pub fn conv_madds(&self) -> u64 {
        self.layers
            .iter()
            .filter(|l| l.kind == CostKind::Conv)
            .map(|l| l.madds)
            .sum()
    }

    /// Aligned text table, one row per costed layer plus totals.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:>5}  {:<10}  {:>11}  {:>12}  {:>14}\n",
            "layer", "kind", "connections", "params", "madds"
        );
        for l in &self.layers {
            let kind = match l.kind {
                CostKind::Conv => "conv",
                CostKind::Fc => "fc",
                CostKind::Classifier => "classifier",
            };
            let conn = format!("{}/{}", l.active_connections, l.possible_connections);
            s += &format!(
                "{:>5}  {:<10}  {:>11}  {:>12}  {:>14}\n",
                l.layer, kind, conn, l.params, l.madds
            );
        }
        s += &format!(
            "{:>5}  {:<10}  {:>11}  {:>12}  {:>14}\n",
            "", "total", "", self.total_params, self.total_madds
        );
        s
    }
}

/// Cost of `arch` under one mask per conv layer.
pub fn arch_cost(arch: &ArchSpec, masks: &[ConnectivityMask]) -> Result<CostReport> {
    let shapes = arch.shapes()?;
    let ifaces = arch.conv_interfaces()?;
    if ifaces.len() != masks.len() {
        return Err(Error::DimMismatch {
            axis: "mask count",
            expected: ifaces.len(),
            actual: masks.len(),
        });
    }
    let classifier = arch
        .layers
        .iter()
        .rposition(|l| matches!(l, LayerSpec::Fc { .. }));
    let mut layers = Vec::new();
    let mut conv = 0;
    let mut prev = Shape::Spatial {
        c: arch.input.channels,
        h: arch.input.height,
        w: arch.input.width,
    };
    for (i, spec) in arch.layers.iter().enumerate() {
        match spec {
            LayerSpec::Conv { batch_norm, .. } => {
                let iface = &ifaces[conv];
                let mask = &masks[conv];
                conv += 1;
                if mask.n_in() != iface.n_in || mask.n_out() != iface.n_out {
                    return Err(Error::DimMismatch {
                        axis: "mask shape",
                        expected: iface.n_in * iface.n_out,
                        actual: mask.capacity(),
                    });
                }
                let active = mask.count() as u64;
                let kk = iface.kernel_len as u64;
                let c_out = iface.n_out as u64;
                let weights = kk * active;
                let extra = c_out + if *batch_norm { 2 * c_out } else { 0 };
                layers.push(LayerCost {
                    layer: i,
                    kind: CostKind::Conv,
                    weights,
                    params: weights + extra,
                    madds: weights * (iface.out_h * iface.out_w) as u64,
                    active_connections: active,
                    possible_connections: mask.capacity() as u64,
                });
            }
            LayerSpec::Fc { out } => {
                let d = prev.len() as u64;
                let k = *out as u64;
                layers.push(LayerCost {
                    layer: i,
                    kind: if Some(i) == classifier {
                        CostKind::Classifier
                    } else {
                        CostKind::Fc
                    },
                    weights: d * k,
                    params: d * k + k,
                    madds: d * k,
                    active_connections: d * k,
                    possible_connections: d * k,
                });
            }
            _ => {}
        }
        prev = shapes[i];
    }
    let total_params = layers
        .iter()
        .filter(|l| l.kind != CostKind::Classifier)
        .map(|l| l.params)
        .sum();
    let classifier_params = layers
        .iter()
        .filter(|l| l.kind == CostKind::Classifier)
        .map(|l| l.params)
        .sum();
    let total_madds = layers.iter().map(|l| l.madds).sum();
    Ok(CostReport {
        layers,
        total_params,
        total_madds,
        classifier_params,
    })
}

pub fn cost_report<T: Scalar>(net: &Network<T>) -> CostReport {
    arch_cost(net.arch(), &net.masks()).expect("network was built from a valid arch")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectivity::{full_masks, InputDims};

    fn one_conv(c_in: usize, c_out: usize) -> ArchSpec {
        ArchSpec {
            input: InputDims {
                channels: c_in,
                height: 28,
                width: 28,
            },
            classes: 10,
            layers: vec![
                LayerSpec::conv(c_out, 3, false),
                LayerSpec::Flatten,
                LayerSpec::Fc { out: 10 },
                LayerSpec::SoftmaxXent,
            ],
        }
    }

    #[test]
    fn single_channel_conv() {
        let arch = one_conv(1, 1);
        let r = arch_cost(&arch, &full_masks(&arch).unwrap()).unwrap();
        assert_eq!(r.layers[0].params, 10);
        assert_eq!(r.layers[0].madds, 7056);
        assert_eq!(r.total_params, 10);
        assert_eq!(r.classifier_params, 784 * 10 + 10);
        assert_eq!(r.total_madds, 7056 + 7840);
    }

    #[test]
    fn half_mask_halves_madds() {
        let arch = one_conv(10, 20);
        let full = arch_cost(&arch, &full_masks(&arch).unwrap()).unwrap();
        let mut m = ConnectivityMask::empty(10, 20, 0).unwrap();
        for o in 0..20 {
            for i in 0..5 {
                m.set(o, (o + i) % 10, true);
            }
        }
        let half = arch_cost(&arch, &[m]).unwrap();
        assert_eq!(2 * half.layers[0].madds, full.layers[0].madds);
        assert_eq!(2 * half.layers[0].weights, full.layers[0].weights);
    }

    #[test]
    fn table_lists_every_costed_layer() {
        let arch = ArchSpec::mnist();
        let r = arch_cost(&arch, &full_masks(&arch).unwrap()).unwrap();
        assert_eq!(r.to_table().lines().count(), r.layers.len() + 2);
    }
}
