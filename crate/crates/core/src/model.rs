//! The assembled network.
//!
//! Four encoder stages with residual double-convolution blocks, four
//! down-sampling blocks, four up-sampling blocks with skip concatenation,
//! four plain decoder blocks, and three 1x1 sigmoid heads: the main
//! full-resolution output and auxiliary outputs at 1/2 and 1/4 resolution.
//!
//! ```text
//! e0 = Enc0(x)                  k      @ 1
//! e1 = Enc1(Down0(e0))          2k     @ 1/2
//! e2 = Enc2(Down1(e1))          4k     @ 1/4
//! e3 = Enc3(Down2(e2))          8k     @ 1/8
//! b  = Down3(e3)                16k    @ 1/16
//! d0 = Dec0([Up0(b),  e3])      8k     @ 1/8
//! d1 = Dec1([Up1(d0), e2])      4k     @ 1/4   -> aux4 head
//! d2 = Dec2([Up2(d1), e1])      2k     @ 1/2   -> aux2 head
//! d3 = Dec3([Up3(d2), e0])      k      @ 1     -> main head
//! ```

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::{Graph, Param, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::layers::{BasicConv2d, Conv2d, InitSpec, Module, ParamFactory};

pub const IN_CHANNELS: usize = 3;
/// Input height and width must be multiples of this.
pub const SPATIAL_DIVISOR: usize = 16;
pub const STAGES: usize = 4;

/// Channel widths derived from the width multiplier `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelPlan {
    k: usize,
}

impl ChannelPlan {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("width multiplier k must be at least 1"));
        }
        Ok(ChannelPlan { k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Output channels of encoder block `s`: `k * 2^s`.
    pub fn encoder(&self, s: usize) -> usize {
        self.k << s
    }

    /// Output channels of decoder block `s`: `k * 2^(3-s)`.
    pub fn decoder(&self, s: usize) -> usize {
        self.k << (3 - s)
    }

    /// Filters of down-sample block `s`: `k * 2^(s+1)`.
    pub fn down(&self, s: usize) -> usize {
        self.k << (s + 1)
    }

    /// Filters of up-sample block `s`: `k * 2^(4-s)`.
    pub fn up(&self, s: usize) -> usize {
        self.k << (4 - s)
    }
}

/// Encoder double-convolution block with a residual shortcut.
#[derive(Debug, Clone)]
pub struct EncoderDcb<T> {
    pub conv1: BasicConv2d<T>,
    pub conv2: BasicConv2d<T>,
    /// 1x1 projection, present only when input and output widths differ.
    pub shortcut: Option<Conv2d<T>>,
    /// Whether the shortcut branch is added. Always on in the network; the
    /// switch exists so the residual path can be isolated in experiments.
    pub residual: bool,
}

impl<T: Element> EncoderDcb<T> {
    pub fn new(f: &mut ParamFactory, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let conv1 = BasicConv2d::new(f, &format!("{name}.conv1"), cin, cout, 3)?;
        let conv2 = BasicConv2d::new(f, &format!("{name}.conv2"), cout, cout, 3)?;
        let shortcut =
            if cin != cout { Some(Conv2d::new(f, &format!("{name}.shortcut"), cin, cout, 1)?) } else { None };
        Ok(EncoderDcb { conv1, conv2, shortcut, residual: true })
    }

    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, training: bool) -> Result<Var> {
        let y = self.conv1.forward(g, x, training)?;
        let y = self.conv2.forward(g, y, training)?;
        if !self.residual {
            return Ok(y);
        }
        let skip = match &self.shortcut {
            Some(proj) => proj.forward(g, x)?,
            None => x,
        };
        g.add(y, skip)
    }
}

impl<T: Element> Module<T> for EncoderDcb<T> {
    fn parameters(&self) -> Vec<&Param<T>> {
        let mut v = self.conv1.parameters();
        v.extend(self.conv2.parameters());
        if let Some(s) = &self.shortcut {
            v.extend(s.parameters());
        }
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.conv1.parameters_mut();
        v.extend(self.conv2.parameters_mut());
        if let Some(s) = &mut self.shortcut {
            v.extend(s.parameters_mut());
        }
        v
    }

    fn buffers(&self) -> Vec<(String, &Vec<T>)> {
        let mut v = self.conv1.buffers();
        v.extend(self.conv2.buffers());
        v
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut v = self.conv1.buffers_mut();
        v.extend(self.conv2.buffers_mut());
        v
    }
}

/// Decoder double-convolution block: a plain stack, no shortcut.
#[derive(Debug, Clone)]
pub struct DecoderDcb<T> {
    pub conv1: BasicConv2d<T>,
    pub conv2: BasicConv2d<T>,
}

impl<T: Element> DecoderDcb<T> {
    pub fn new(f: &mut ParamFactory, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(DecoderDcb {
            conv1: BasicConv2d::new(f, &format!("{name}.conv1"), cin, cout, 3)?,
            conv2: BasicConv2d::new(f, &format!("{name}.conv2"), cout, cout, 3)?,
        })
    }

    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, training: bool) -> Result<Var> {
        let y = self.conv1.forward(g, x, training)?;
        self.conv2.forward(g, y, training)
    }
}

impl<T: Element> Module<T> for DecoderDcb<T> {
    fn parameters(&self) -> Vec<&Param<T>> {
        let mut v = self.conv1.parameters();
        v.extend(self.conv2.parameters());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.conv1.parameters_mut();
        v.extend(self.conv2.parameters_mut());
        v
    }

    fn buffers(&self) -> Vec<(String, &Vec<T>)> {
        let mut v = self.conv1.buffers();
        v.extend(self.conv2.buffers());
        v
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut v = self.conv1.buffers_mut();
        v.extend(self.conv2.buffers_mut());
        v
    }
}

/// Max-pool 2x2 followed by a BasicConv2d.
#[derive(Debug, Clone)]
pub struct DownBlock<T> {
    pub conv: BasicConv2d<T>,
}

impl<T: Element> DownBlock<T> {
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, training: bool) -> Result<Var> {
        let y = g.maxpool2d(x)?;
        self.conv.forward(g, y, training)
    }
}

/// Nearest 2x upsampling followed by a BasicConv2d.
#[derive(Debug, Clone)]
pub struct UpBlock<T> {
    pub conv: BasicConv2d<T>,
}

impl<T: Element> UpBlock<T> {
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, training: bool) -> Result<Var> {
        let y = g.upsample_nearest2x(x);
        self.conv.forward(g, y, training)
    }
}

/// Graph handles of the three sigmoid outputs.
#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    /// `(N, 1, H, W)`
    pub main: Var,
    /// `(N, 1, H/2, W/2)`, present when auxiliary heads were evaluated.
    pub aux2: Option<Var>,
    /// `(N, 1, H/4, W/4)`, present when auxiliary heads were evaluated.
    pub aux4: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct UCloudNet<T> {
    plan: ChannelPlan,
    pub encoders: Vec<EncoderDcb<T>>,
    pub downs: Vec<DownBlock<T>>,
    pub ups: Vec<UpBlock<T>>,
    pub decoders: Vec<DecoderDcb<T>>,
    pub head_main: Conv2d<T>,
    pub head_aux2: Conv2d<T>,
    pub head_aux4: Conv2d<T>,
}

impl<T: Element> UCloudNet<T> {
    /// Builds the network for width multiplier `k` with seeded initialization.
    pub fn build(k: usize, seed: u64) -> Result<Self> {
        let plan = ChannelPlan::new(k)?;
        let f = &mut ParamFactory::new(InitSpec, seed);
        let mut encoders = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let cin = if s == 0 { IN_CHANNELS } else { plan.down(s - 1) };
            encoders.push(EncoderDcb::new(f, &format!("encoder.{s}"), cin, plan.encoder(s))?);
        }
        let mut downs = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let conv = BasicConv2d::new(f, &format!("down.{s}"), plan.encoder(s), plan.down(s), 3)?;
            downs.push(DownBlock { conv });
        }
        let mut ups = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let cin = if s == 0 { plan.down(STAGES - 1) } else { plan.decoder(s - 1) };
            let conv = BasicConv2d::new(f, &format!("up.{s}"), cin, plan.up(s), 3)?;
            ups.push(UpBlock { conv });
        }
        let mut decoders = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let cin = plan.up(s) + plan.encoder(STAGES - 1 - s);
            decoders.push(DecoderDcb::new(f, &format!("decoder.{s}"), cin, plan.decoder(s))?);
        }
        let head_main = Conv2d::new(f, "head.main", plan.decoder(3), 1, 1)?;
        let head_aux2 = Conv2d::new(f, "head.aux2", plan.decoder(2), 1, 1)?;
        let head_aux4 = Conv2d::new(f, "head.aux4", plan.decoder(1), 1, 1)?;
        Ok(UCloudNet { plan, encoders, downs, ups, decoders, head_main, head_aux2, head_aux4 })
    }

    pub fn plan(&self) -> ChannelPlan {
        self.plan
    }

    pub fn k(&self) -> usize {
        self.plan.k()
    }

    /// Runs the network. With `aux` false the auxiliary heads are skipped;
    /// they are leaf branches so the main output is unaffected.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, training: bool, aux: bool) -> Result<Outputs> {
        let s = g.shape(x);
        if s.c() != IN_CHANNELS {
            return Err(Error::shape("ucloudnet", format!("expected {IN_CHANNELS} input channels, got {s}")));
        }
        if !s.h().is_multiple_of(SPATIAL_DIVISOR) || !s.w().is_multiple_of(SPATIAL_DIVISOR) || s.h() == 0 || s.w() == 0
        {
            return Err(Error::shape(
                "ucloudnet",
                format!("input height and width must be positive multiples of {SPATIAL_DIVISOR}, got {s}"),
            ));
        }
        let mut skips = Vec::with_capacity(STAGES);
        let mut h = x;
        for stage in 0..STAGES {
            if stage > 0 {
                h = self.downs[stage - 1].forward(g, h, training)?;
            }
            h = self.encoders[stage].forward(g, h, training)?;
            skips.push(h);
        }
        h = self.downs[STAGES - 1].forward(g, h, training)?;
        let mut taps = Vec::with_capacity(STAGES);
        for stage in 0..STAGES {
            let up = self.ups[stage].forward(g, h, training)?;
            let cat = g.concat_channels(up, skips[STAGES - 1 - stage])?;
            h = self.decoders[stage].forward(g, cat, training)?;
            taps.push(h);
        }
        let logits = self.head_main.forward(g, taps[3])?;
        let main = g.sigmoid(logits);
        let (aux2, aux4) = if aux {
            let l2 = self.head_aux2.forward(g, taps[2])?;
            let l4 = self.head_aux4.forward(g, taps[1])?;
            (Some(g.sigmoid(l2)), Some(g.sigmoid(l4)))
        } else {
            (None, None)
        };
        Ok(Outputs { main, aux2, aux4 })
    }

    /// Parameter names in checkpoint order.
    pub fn parameter_names(&self) -> Vec<String> {
        self.parameters().iter().map(|p| String::from(p.name())).collect()
    }

    /// Trainable values plus batch-norm running statistics.
    pub fn num_state_values(&self) -> usize {
        self.num_trainable() + self.buffers().iter().map(|(_, b)| b.len()).sum::<usize>()
    }
}

impl<T: Element> Module<T> for UCloudNet<T> {
    fn parameters(&self) -> Vec<&Param<T>> {
        let mut v = Vec::new();
        self.encoders.iter().for_each(|b| v.extend(b.parameters()));
        self.downs.iter().for_each(|b| v.extend(b.conv.parameters()));
        self.ups.iter().for_each(|b| v.extend(b.conv.parameters()));
        self.decoders.iter().for_each(|b| v.extend(b.parameters()));
        v.extend(self.head_main.parameters());
        v.extend(self.head_aux2.parameters());
        v.extend(self.head_aux4.parameters());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        self.encoders.iter_mut().for_each(|b| v.extend(b.parameters_mut()));
        self.downs.iter_mut().for_each(|b| v.extend(b.conv.parameters_mut()));
        self.ups.iter_mut().for_each(|b| v.extend(b.conv.parameters_mut()));
        self.decoders.iter_mut().for_each(|b| v.extend(b.parameters_mut()));
        v.extend(self.head_main.parameters_mut());
        v.extend(self.head_aux2.parameters_mut());
        v.extend(self.head_aux4.parameters_mut());
        v
    }

    fn buffers(&self) -> Vec<(String, &Vec<T>)> {
        let mut v = Vec::new();
        self.encoders.iter().for_each(|b| v.extend(b.buffers()));
        self.downs.iter().for_each(|b| v.extend(b.conv.buffers()));
        self.ups.iter().for_each(|b| v.extend(b.conv.buffers()));
        self.decoders.iter().for_each(|b| v.extend(b.buffers()));
        v
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut v = Vec::new();
        self.encoders.iter_mut().for_each(|b| v.extend(b.buffers_mut()));
        self.downs.iter_mut().for_each(|b| v.extend(b.conv.buffers_mut()));
        self.ups.iter_mut().for_each(|b| v.extend(b.conv.buffers_mut()));
        self.decoders.iter_mut().for_each(|b| v.extend(b.buffers_mut()));
        v
    }
}

#[cfg(test)]
mod tests;
