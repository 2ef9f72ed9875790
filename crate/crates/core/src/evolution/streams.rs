//! Named random streams for every batch the training loop draws.
//!
//! Each stream depends only on the run seed and its label, so results do
//! not depend on evaluation order or thread scheduling, and an external
//! trainer can replay the exact batches.

use crate::data::RngStream;

#[derive(Debug, Clone)]
pub struct Streams {
    root: RngStream,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self {
            root: RngStream::new(seed),
        }
    }

    pub fn root(&self) -> &RngStream {
        &self.root
    }

    pub fn init_generator(&self, j: usize) -> RngStream {
        self.root.child(&format!("init/g{j}"))
    }

    pub fn init_discriminator(&self, i: usize) -> RngStream {
        self.root.child(&format!("init/d{i}"))
    }

    /// Real batch for discriminator parent `i` in inner round `k` of
    /// iteration `t`; `cycle` counts passes through the mutation list.
    pub fn d_real(&self, t: usize, k: usize, i: usize, cycle: usize) -> RngStream {
        self.root.child(&format!("t{t}/d{k}/p{i}/c{cycle}/real"))
    }

    pub fn d_noise(&self, t: usize, k: usize, i: usize, cycle: usize) -> RngStream {
        self.root.child(&format!("t{t}/d{k}/p{i}/c{cycle}/noise"))
    }

    pub fn d_penalty(&self, t: usize, k: usize, i: usize, n: usize) -> RngStream {
        self.root.child(&format!("t{t}/d{k}/p{i}/o{n}/gp"))
    }

    pub fn d_eval_real(&self, t: usize, k: usize) -> RngStream {
        self.root.child(&format!("t{t}/d{k}/eval/real"))
    }

    pub fn d_eval_noise(&self, t: usize, k: usize) -> RngStream {
        self.root.child(&format!("t{t}/d{k}/eval/noise"))
    }

    pub fn g_noise(&self, t: usize, j: usize, cycle: usize) -> RngStream {
        self.root.child(&format!("t{t}/g/p{j}/c{cycle}/noise"))
    }

    pub fn g_eval_real(&self, t: usize) -> RngStream {
        self.root.child(&format!("t{t}/g/eval/real"))
    }

    pub fn g_eval_noise(&self, t: usize) -> RngStream {
        self.root.child(&format!("t{t}/g/eval/noise"))
    }

    /// Noise for the coverage samples logged at iteration `t`.
    pub fn coverage(&self, t: usize) -> RngStream {
        self.root.child(&format!("t{t}/coverage"))
    }
}
