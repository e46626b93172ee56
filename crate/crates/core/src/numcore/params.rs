use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{NumError, Tensor};

const MAGIC: &[u8; 4] = b"UDPM";
const VERSION: u8 = 1;

#[derive(Clone, Debug, Default)]
struct OptState {
    /// SGD velocity buffer.
    velocity: Option<Tensor>,
    /// AdaDelta running average of squared gradients.
    avg_sq_grad: Option<Tensor>,
    /// AdaDelta running average of squared updates.
    avg_sq_update: Option<Tensor>,
}

#[derive(Clone, Debug)]
struct Param {
    value: Tensor,
    grad: Option<Tensor>,
    opt: OptState,
}

/// Named parameter tensors plus per-parameter optimizer state. Gradients are
/// staged here between a backward pass and an optimizer step.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<(), NumError> {
        if self.entries.contains_key(name) {
            return Err(NumError::DuplicateParam { name: name.to_string() });
        }
        self.entries.insert(name.to_string(), Param { value, grad: None, opt: OptState::default() });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NumError> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| NumError::UnknownParam { name: name.to_string() })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, NumError> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| NumError::UnknownParam { name: name.to_string() })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn set_grad(&mut self, name: &str, grad: Tensor) -> Result<(), NumError> {
        let param = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NumError::UnknownParam { name: name.to_string() })?;
        if !param.value.same_shape(&grad) {
            return Err(NumError::ShapeMismatch {
                op: "set_grad",
                detail: format!(
                    "param {:?} has shape {:?}, gradient {:?}",
                    name,
                    param.value.shape(),
                    grad.shape()
                ),
            });
        }
        param.grad = Some(grad);
        Ok(())
    }

    /// Add into an existing staged gradient (or set it when absent).
    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<(), NumError> {
        match self.entries.get(name).and_then(|p| p.grad.clone()) {
            Some(mut existing) => {
                if !existing.same_shape(grad) {
                    return Err(NumError::ShapeMismatch {
                        op: "accumulate_grad",
                        detail: format!("{:?} vs {:?}", existing.shape(), grad.shape()),
                    });
                }
                for (a, &b) in existing.data_mut().iter_mut().zip(grad.data()) {
                    *a += b;
                }
                self.set_grad(name, existing)
            }
            None => self.set_grad(name, grad.clone()),
        }
    }

    pub fn clear_grads(&mut self) {
        for param in self.entries.values_mut() {
            param.grad = None;
        }
    }

    /// Scale every staged gradient in place.
    pub fn scale_grads(&mut self, factor: f64) {
        for param in self.entries.values_mut() {
            if let Some(g) = &mut param.grad {
                for v in g.data_mut() {
                    *v *= factor;
                }
            }
        }
    }

    /// L2 norm over all staged gradients taken as one flat vector.
    pub fn grad_global_norm(&self) -> f64 {
        self.entries
            .values()
            .filter_map(|p| p.grad.as_ref())
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale gradients so their global L2 norm does not exceed `max_norm`.
    /// Returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> Result<f64, NumError> {
        if max_norm <= 0.0 {
            return Err(NumError::InvalidArgument {
                op: "clip_global_norm",
                detail: "max_norm must be positive".into(),
            });
        }
        let norm = self.grad_global_norm();
        if norm > max_norm {
            self.scale_grads(max_norm / norm);
        }
        Ok(norm)
    }

    fn grads_populated(&self) -> Result<(), NumError> {
        for (name, param) in &self.entries {
            if param.grad.is_none() {
                return Err(NumError::MissingGradient { name: name.clone() });
            }
        }
        Ok(())
    }

    /// Classic momentum: v <- momentum * v - lr * g; theta <- theta + v.
    /// Consumes the staged gradients.
    pub fn sgd_momentum_step(&mut self, lr: f64, momentum: f64) -> Result<(), NumError> {
        self.grads_populated()?;
        for param in self.entries.values_mut() {
            let grad = param.grad.take().expect("checked above");
            let velocity = param
                .opt
                .velocity
                .get_or_insert_with(|| Tensor::zeros(param.value.shape()));
            for ((v, &g), p) in velocity
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(param.value.data_mut())
            {
                *v = momentum * *v - lr * g;
                *p += *v;
            }
        }
        Ok(())
    }

    /// AdaDelta step: accumulators for E[g^2] and E[dx^2], update
    /// dx = -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g.
    /// Consumes the staged gradients.
    pub fn adadelta_step(&mut self, rho: f64, eps: f64) -> Result<(), NumError> {
        self.grads_populated()?;
        for param in self.entries.values_mut() {
            let grad = param.grad.take().expect("checked above");
            let shape = param.value.shape().to_vec();
            let avg_g = param.opt.avg_sq_grad.get_or_insert_with(|| Tensor::zeros(&shape));
            let avg_u = param.opt.avg_sq_update.get_or_insert_with(|| Tensor::zeros(&shape));
            for (((eg, eu), &g), p) in avg_g
                .data_mut()
                .iter_mut()
                .zip(avg_u.data_mut())
                .zip(grad.data())
                .zip(param.value.data_mut())
            {
                *eg = rho * *eg + (1.0 - rho) * g * g;
                let dx = -((*eu + eps).sqrt() / (*eg + eps).sqrt()) * g;
                *eu = rho * *eu + (1.0 - rho) * dx * dx;
                *p += dx;
            }
        }
        Ok(())
    }

    /// Versioned flat binary dump of parameter values. Optimizer state and
    /// staged gradients are transient and not written.
    pub fn save(&self, path: &Path) -> Result<(), NumError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION])?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, param) in &self.entries {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u16).to_le_bytes())?;
            w.write_all(bytes)?;
            let shape = param.value.shape();
            w.write_all(&[shape.len() as u8])?;
            for &dim in shape {
                w.write_all(&(dim as u32).to_le_bytes())?;
            }
            for &v in param.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NumError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(NumError::BadMagic { expected: "UDPM", found: magic.to_vec() });
        }
        let version = read_u8(&mut r)?;
        if version != VERSION {
            return Err(NumError::BadVersion { expected: VERSION, found: version });
        }
        let count = read_u32(&mut r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u16(&mut r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            read_exact(&mut r, &mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| NumError::Corrupt { detail: "parameter name is not UTF-8".into() })?;
            let rank = read_u8(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut buf = [0u8; 8];
                read_exact(&mut r, &mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            store.insert(&name, Tensor::new(shape, data)?)?;
        }
        Ok(store)
    }

    /// Parameter values only, for comparisons and binding.
    pub fn values(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(name, p)| (name.as_str(), &p.value))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), NumError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            NumError::Corrupt { detail: "file truncated".into() }
        } else {
            NumError::Io(e)
        }
    })
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8, NumError> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, NumError> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NumError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
