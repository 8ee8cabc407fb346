//! Binary checkpoints: networks, optimizer state, label store, curriculum
//! plan, and the epoch cursor. Everything else a resumed run needs (batch
//! order, augmentation draws) is derived statelessly from the config seed,
//! so no RNG state is captured. Fixed little-endian layout keeps files
//! byte-deterministic.

use ndarray::{Array2, ArrayD, IxDyn};
use std::io::{Read, Write};
use std::path::Path;

use crate::curriculum::CurriculumPlan;
use crate::error::{Error, Result};
use crate::labels::LabelStore;
use crate::nn::{SequentialNet, SgdMomentum};

const MAGIC: &[u8; 8] = b"CCKPT\x02\x00\x00";

pub struct Checkpoint {
    pub epoch: usize,
    pub net_params: Vec<Vec<ArrayD<f32>>>,
    pub velocities: Vec<Vec<ArrayD<f32>>>,
    /// Batchnorm running statistics per network.
    pub buffers: Vec<Vec<ArrayD<f32>>>,
    pub store: Option<StoreState>,
    pub plan: Option<PlanState>,
}

pub struct StoreState {
    pub logits: Array2<f64>,
    pub updatable: Vec<bool>,
    pub ever_changed: Vec<bool>,
    pub init_labels: Vec<u16>,
    pub k_init: f64,
    pub lambda: f64,
}

/// The plan fields a resumed run needs (audit features are exported to CSV
/// at build time and not duplicated here).
pub struct PlanState {
    pub ids: Vec<usize>,
    pub tier: Vec<u8>,
    pub class_of: Vec<u16>,
    pub density: Vec<u32>,
    pub peak_distance: Vec<f64>,
    pub cutoff: Vec<f64>,
    pub variance_captured: f64,
    pub unlock_epoch: [usize; 3],
}

impl From<&CurriculumPlan> for PlanState {
    fn from(p: &CurriculumPlan) -> Self {
        PlanState {
            ids: p.ids.clone(),
            tier: p.tier.clone(),
            class_of: p.class_of.clone(),
            density: p.density.clone(),
            peak_distance: p.peak_distance.clone(),
            cutoff: p.cutoff.clone(),
            variance_captured: p.variance_captured,
            unlock_epoch: p.unlock_epoch,
        }
    }
}

impl PlanState {
    pub fn into_plan(self) -> CurriculumPlan {
        CurriculumPlan {
            ids: self.ids,
            tier: self.tier,
            class_of: self.class_of,
            density: self.density,
            peak_distance: self.peak_distance,
            cutoff: self.cutoff,
            features: Array2::zeros((0, 0)),
            variance_captured: self.variance_captured,
            unlock_epoch: self.unlock_epoch,
        }
    }
}

fn w_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn r_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn r_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn write_tensor_f32(w: &mut impl Write, t: &ArrayD<f32>) -> Result<()> {
    w_u64(w, t.ndim() as u64)?;
    for &d in t.shape() {
        w_u64(w, d as u64)?;
    }
    for &v in t.as_slice().expect("contiguous") {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor_f32(r: &mut impl Read) -> Result<ArrayD<f32>> {
    let ndim = r_u64(r)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r_u64(r)? as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = vec![0f32; len];
    for v in data.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *v = f32::from_le_bytes(b);
    }
    ArrayD::from_shape_vec(IxDyn(&shape), data)
        .map_err(|e| Error::Runtime(format!("bad tensor in checkpoint: {e}")))
}

pub fn save(
    path: &Path,
    epoch: usize,
    nets: &[&SequentialNet],
    opts: &[&SgdMomentum],
    store: Option<&LabelStore>,
    plan: Option<&CurriculumPlan>,
) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w_u64(&mut w, epoch as u64)?;
    w_u64(&mut w, nets.len() as u64)?;
    for (net, opt) in nets.iter().zip(opts) {
        let params = net.params();
        w_u64(&mut w, params.len() as u64)?;
        for p in &params {
            write_tensor_f32(&mut w, p)?;
        }
        let vel = opt.velocity();
        w_u64(&mut w, vel.len() as u64)?;
        for v in vel {
            write_tensor_f32(&mut w, v)?;
        }
        let bufs = net.buffers();
        w_u64(&mut w, bufs.len() as u64)?;
        for b in &bufs {
            write_tensor_f32(&mut w, b)?;
        }
    }
    match store {
        None => w_u64(&mut w, 0)?,
        Some(s) => {
            w_u64(&mut w, 1)?;
            let (logits, updatable, changed, init, k, lambda) = s.to_parts();
            w_u64(&mut w, logits.nrows() as u64)?;
            w_u64(&mut w, logits.ncols() as u64)?;
            w_f64(&mut w, k)?;
            w_f64(&mut w, lambda)?;
            for &v in logits.iter() {
                w_f64(&mut w, v)?;
            }
            for &b in updatable {
                w.write_all(&[b as u8])?;
            }
            for &b in changed {
                w.write_all(&[b as u8])?;
            }
            for &l in init {
                w.write_all(&l.to_le_bytes())?;
            }
        }
    }
    match plan {
        None => w_u64(&mut w, 0)?,
        Some(p) => {
            w_u64(&mut w, 1)?;
            w_u64(&mut w, p.ids.len() as u64)?;
            for &id in &p.ids {
                w_u64(&mut w, id as u64)?;
            }
            w.write_all(&p.tier)?;
            for &c in &p.class_of {
                w.write_all(&c.to_le_bytes())?;
            }
            for &d in &p.density {
                w.write_all(&d.to_le_bytes())?;
            }
            for &e in &p.peak_distance {
                w_f64(&mut w, e)?;
            }
            w_u64(&mut w, p.cutoff.len() as u64)?;
            for &c in &p.cutoff {
                w_f64(&mut w, c)?;
            }
            w_f64(&mut w, p.variance_captured)?;
            for &u in &p.unlock_epoch {
                w_u64(&mut w, u as u64)?;
            }
        }
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = std::io::BufReader::new(
        std::fs::File::open(path).map_err(|e| Error::load(path, format!("{e}")))?,
    );
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::load(path, "not a checkpoint file"));
    }
    let epoch = r_u64(&mut r)? as usize;
    let n_nets = r_u64(&mut r)? as usize;
    let mut net_params = Vec::with_capacity(n_nets);
    let mut velocities = Vec::with_capacity(n_nets);
    let mut buffers = Vec::with_capacity(n_nets);
    for _ in 0..n_nets {
        let np = r_u64(&mut r)? as usize;
        let mut params = Vec::with_capacity(np);
        for _ in 0..np {
            params.push(read_tensor_f32(&mut r)?);
        }
        net_params.push(params);
        let nv = r_u64(&mut r)? as usize;
        let mut vel = Vec::with_capacity(nv);
        for _ in 0..nv {
            vel.push(read_tensor_f32(&mut r)?);
        }
        velocities.push(vel);
        let nb = r_u64(&mut r)? as usize;
        let mut bufs = Vec::with_capacity(nb);
        for _ in 0..nb {
            bufs.push(read_tensor_f32(&mut r)?);
        }
        buffers.push(bufs);
    }
    let store = if r_u64(&mut r)? == 1 {
        let n = r_u64(&mut r)? as usize;
        let c = r_u64(&mut r)? as usize;
        let k_init = r_f64(&mut r)?;
        let lambda = r_f64(&mut r)?;
        let mut logits = Array2::zeros((n, c));
        for v in logits.iter_mut() {
            *v = r_f64(&mut r)?;
        }
        let mut flags = vec![0u8; n];
        r.read_exact(&mut flags)?;
        let updatable = flags.iter().map(|&b| b != 0).collect();
        let mut flags2 = vec![0u8; n];
        r.read_exact(&mut flags2)?;
        let ever_changed = flags2.iter().map(|&b| b != 0).collect();
        let mut init_labels = vec![0u16; n];
        for l in init_labels.iter_mut() {
            let mut b = [0u8; 2];
            r.read_exact(&mut b)?;
            *l = u16::from_le_bytes(b);
        }
        Some(StoreState {
            logits,
            updatable,
            ever_changed,
            init_labels,
            k_init,
            lambda,
        })
    } else {
        None
    };
    let plan = if r_u64(&mut r)? == 1 {
        let n = r_u64(&mut r)? as usize;
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            ids.push(r_u64(&mut r)? as usize);
        }
        let mut tier = vec![0u8; n];
        r.read_exact(&mut tier)?;
        let mut class_of = vec![0u16; n];
        for c in class_of.iter_mut() {
            let mut b = [0u8; 2];
            r.read_exact(&mut b)?;
            *c = u16::from_le_bytes(b);
        }
        let mut density = vec![0u32; n];
        for d in density.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b);
        }
        let mut peak_distance = vec![0f64; n];
        for e in peak_distance.iter_mut() {
            *e = r_f64(&mut r)?;
        }
        let nc = r_u64(&mut r)? as usize;
        let mut cutoff = vec![0f64; nc];
        for c in cutoff.iter_mut() {
            *c = r_f64(&mut r)?;
        }
        let variance_captured = r_f64(&mut r)?;
        let unlock_epoch = [
            r_u64(&mut r)? as usize,
            r_u64(&mut r)? as usize,
            r_u64(&mut r)? as usize,
        ];
        Some(PlanState {
            ids,
            tier,
            class_of,
            density,
            peak_distance,
            cutoff,
            variance_captured,
            unlock_epoch,
        })
    } else {
        None
    };
    Ok(Checkpoint {
        epoch,
        net_params,
        velocities,
        buffers,
        store,
        plan,
    })
}

/// Write loaded parameters and buffers back into a freshly built network.
pub fn restore_net(
    net: &mut SequentialNet,
    params: &[ArrayD<f32>],
    buffers: &[ArrayD<f32>],
) -> Result<()> {
    let shapes: Vec<Vec<usize>> = net.params().iter().map(|p| p.shape().to_vec()).collect();
    if shapes.len() != params.len() {
        return Err(Error::Runtime(format!(
            "checkpoint has {} tensors, network has {}",
            params.len(),
            shapes.len()
        )));
    }
    for (want, got) in shapes.iter().zip(params.iter()) {
        if want != got.shape() {
            return Err(Error::Runtime(format!(
                "checkpoint tensor shape {:?} does not match network {:?}",
                got.shape(),
                want
            )));
        }
    }
    if net.buffers().len() != buffers.len() {
        return Err(Error::Runtime(format!(
            "checkpoint has {} buffers, network has {}",
            buffers.len(),
            net.buffers().len()
        )));
    }
    let mut it = params.iter();
    net.visit_params_mut(|slice| {
        let src = it.next().expect("checked length");
        slice.copy_from_slice(src.as_slice().expect("contiguous"));
    });
    let mut it = buffers.iter();
    net.visit_buffers_mut(|slice| {
        let src = it.next().expect("checked length");
        slice.copy_from_slice(src.as_slice().expect("contiguous"));
    });
    Ok(())
}

impl StoreState {
    pub fn into_store(self) -> LabelStore {
        LabelStore::from_parts(
            self.logits,
            self.updatable,
            self.ever_changed,
            self.init_labels,
            self.k_init,
            self.lambda,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn;

    #[test]
    fn roundtrip_nets_store_and_plan() {
        let dir = std::env::temp_dir().join(format!("cocorrect-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("test.ckpt");

        let net1 = nn::mlp(1, (4, 4), &[6], 3, 1).unwrap();
        let net2 = nn::mlp(1, (4, 4), &[6], 3, 2).unwrap();
        let opt = SgdMomentum::new(0.1, 0.9, 0.0);
        let mut store = LabelStore::new(&[0, 1, 2, 1], 3, 10.0, 500.0).unwrap();
        store.unlock(&[1, 3]);
        let plan = CurriculumPlan {
            ids: vec![0, 1, 2, 3],
            tier: vec![1, 2, 3, 1],
            class_of: vec![0, 1, 2, 1],
            density: vec![3, 1, 0, 2],
            peak_distance: vec![0.5, 1.0, 2.0, 0.1],
            cutoff: vec![0.4, 0.6, 0.2],
            features: ndarray::Array2::zeros((0, 0)),
            variance_captured: 0.87,
            unlock_epoch: [2, 4, 6],
        };

        save(&path, 5, &[&net1, &net2], &[&opt, &opt], Some(&store), Some(&plan)).unwrap();
        let ckpt = load(&path).unwrap();
        assert_eq!(ckpt.epoch, 5);
        assert_eq!(ckpt.net_params.len(), 2);
        assert_eq!(ckpt.net_params[0], net1.params());
        assert_eq!(ckpt.net_params[1], net2.params());
        assert!(ckpt.velocities[0].is_empty());

        let s = ckpt.store.unwrap().into_store();
        assert_eq!(s.logits(), store.logits());
        assert!(s.is_updatable(1) && s.is_updatable(3) && !s.is_updatable(0));
        assert_eq!(s.k_init(), 10.0);
        assert_eq!(s.lambda(), 500.0);

        let p = ckpt.plan.unwrap().into_plan();
        assert_eq!(p.tier, plan.tier);
        assert_eq!(p.unlock_epoch, plan.unlock_epoch);
        assert_eq!(p.cutoff, plan.cutoff);

        // restoring into a differently-seeded net reproduces params exactly
        let mut fresh = nn::mlp(1, (4, 4), &[6], 3, 99).unwrap();
        restore_net(&mut fresh, &ckpt.net_params[0], &ckpt.buffers[0]).unwrap();
        assert_eq!(fresh.params(), net1.params());

        // identical saves are byte-identical
        let path2 = dir.join("test2.ckpt");
        save(&path2, 5, &[&net1, &net2], &[&opt, &opt], Some(&store), Some(&plan)).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = std::env::temp_dir().join(format!("cocorrect-ckpt-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load(&path).is_err());
        std::fs::remove_dir_all(dir).ok();
    }
}
