//! Layer table, parameter totals and dilation analysis for a config.

use std::fmt;

use crate::error::Result;
use crate::ops::kernel_extent;

use super::config::ModelConfig;
use super::model::{BnLayer, ConvLayer, Network, ResidualBlock};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRow {
    pub name: String,
    pub kind: String,
    /// (c, d, h, w) of the layer output.
    pub output: [usize; 4],
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchExtent {
    pub rate: usize,
    pub extent: usize,
    /// Every off-centre tap falls outside the bottleneck map on all axes.
    pub void: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub config: ModelConfig,
    pub rows: Vec<LayerRow>,
    pub total_params: usize,
    /// (d, h, w) of the bottleneck for the configured patch.
    pub bottleneck: [usize; 3],
    pub branches: Vec<BranchExtent>,
}

struct Walker {
    rows: Vec<LayerRow>,
}

impl Walker {
    fn conv(&mut self, l: &ConvLayer, sp: [usize; 3]) -> [usize; 4] {
        let s = &l.spec;
        let k = s.kernel[0];
        let kind = if s.dilation[0] > 1 {
            format!("conv {k}x{k}x{k} r={}", s.dilation[0])
        } else {
            format!("conv {k}x{k}x{k}")
        };
        let out = [s.out_channels, sp[0], sp[1], sp[2]];
        self.rows.push(LayerRow {
            name: l.name.clone(),
            kind,
            output: out,
            params: s.param_count(),
        });
        out
    }

    fn bn(&mut self, l: &BnLayer, sp: [usize; 3]) {
        self.rows.push(LayerRow {
            name: l.name.clone(),
            kind: "batchnorm".into(),
            output: [l.channels, sp[0], sp[1], sp[2]],
            params: 2 * l.channels,
        });
    }

    fn other(&mut self, name: &str, kind: &str, out: [usize; 4]) {
        self.rows.push(LayerRow {
            name: name.into(),
            kind: kind.into(),
            output: out,
            params: 0,
        });
    }

    fn residual(&mut self, b: &ResidualBlock, sp: [usize; 3]) -> [usize; 4] {
        self.conv(&b.conv1, sp);
        self.bn(&b.bn1, sp);
        self.conv(&b.conv2, sp);
        self.bn(&b.bn2, sp);
        if let Some(p) = &b.projection {
            self.conv(p, sp);
        }
        [b.out_channels, sp[0], sp[1], sp[2]]
    }
}

pub fn summarize(config: &ModelConfig) -> Result<Summary> {
    let net = Network::new(config.clone())?;
    let mut w = Walker { rows: Vec::new() };
    let mut sp = config.patch_shape;
    for enc in &net.encoders {
        w.residual(enc, sp);
        sp = sp.map(|x| x / 2);
        w.other(&format!("{}.pool", enc.name), "maxpool 2x2x2", [enc.out_channels, sp[0], sp[1], sp[2]]);
    }
    w.residual(&net.bottleneck, sp);
    for b in &net.context.branches {
        w.conv(b, sp);
    }
    w.conv(&net.context.fuse, sp);
    w.bn(&net.context.bn, sp);
    let bottleneck = sp;
    for dec in &net.decoders {
        sp = sp.map(|x| x * 2);
        w.other(&format!("{}.upsample", dec.name), "trilinear x2", [dec.up.spec.in_channels, sp[0], sp[1], sp[2]]);
        w.conv(&dec.up, sp);
        w.residual(&dec.block, sp);
    }
    w.conv(&net.head, sp);

    let branches = config
        .dilation_rates
        .iter()
        .map(|&r| BranchExtent {
            rate: r,
            extent: kernel_extent(3, r),
            void: bottleneck.iter().all(|&len| r >= len),
        })
        .collect();
    Ok(Summary {
        config: config.clone(),
        total_params: w.rows.iter().map(|r| r.params).sum(),
        rows: w.rows,
        bottleneck,
        branches,
    })
}

impl Summary {
    pub fn warnings(&self) -> Vec<String> {
        let plane = self.bottleneck.iter().copied().max().unwrap_or(0);
        self.branches
            .iter()
            .enumerate()
            .filter(|(_, b)| b.void)
            .map(|(i, b)| {
                format!(
                    "sampling void: branch {i} (r={}) extent {} > {plane}, off-centre taps read only zero padding",
                    b.rate, b.extent
                )
            })
            .collect()
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [pd, ph, pw] = self.config.patch_shape;
        writeln!(f, "patch (d x h x w): {pd} x {ph} x {pw}")?;
        writeln!(f, "{:<24} {:<20} {:>22} {:>10}", "layer", "kind", "output (c,d,h,w)", "params")?;
        for r in &self.rows {
            let [c, d, h, w] = r.output;
            writeln!(
                f,
                "{:<24} {:<20} {:>22} {:>10}",
                r.name,
                r.kind,
                format!("({c}, {d}, {h}, {w})"),
                r.params
            )?;
        }
        let [bd, bh, bw] = self.bottleneck;
        writeln!(f, "bottleneck (d x h x w): {bd} x {bh} x {bw}  (w x h x d: {bw}x{bh}x{bd})")?;
        writeln!(f, "{:<8} {:>4} {:>7}", "branch", "rate", "extent")?;
        for (i, b) in self.branches.iter().enumerate() {
            writeln!(f, "{:<8} {:>4} {:>7}", i, b.rate, b.extent)?;
        }
        for w in self.warnings() {
            writeln!(f, "WARNING {w}")?;
        }
        write!(f, "total parameters: {}", self.total_params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::DilationPreset;

    #[test]
    fn default_summary_matches_network_count() {
        let cfg = ModelConfig::default();
        let s = summarize(&cfg).unwrap();
        assert_eq!(s.total_params, Network::new(cfg).unwrap().param_count());
        assert_eq!(s.bottleneck, [8, 16, 16]);
        assert!(s.warnings().is_empty());
    }

    #[test]
    fn widest_preset_flags_void() {
        let s = summarize(&ModelConfig::default().with_preset(DilationPreset::Abl3)).unwrap();
        let ext: Vec<usize> = s.branches.iter().map(|b| b.extent).collect();
        assert_eq!(ext, vec![3, 9, 17, 33]);
        let w = s.warnings();
        assert_eq!(w.len(), 1);
        assert!(w[0].contains("33 > 16"), "{}", w[0]);
    }
}
