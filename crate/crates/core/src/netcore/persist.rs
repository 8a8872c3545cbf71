//! Checkpoint round trips for the networks. Parameters go under a caller
//! chosen prefix; configs travel in the header metadata.

use std::collections::BTreeMap;

use super::{DiscConfig, Discriminator, EmbedderConfig, Generator, GenConfig, IdentityEmbedder};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::scalar::Real;

impl<T: Real> Generator<T> {
    pub fn store(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        ck.insert_params(&format!("{prefix}param."), &self.params);
        for (k, v) in &self.noise {
            ck.insert(format!("{prefix}noise.{k}"), v);
        }
        ck.set_meta(&format!("{prefix}config"), &self.cfg)?;
        Ok(())
    }

    pub fn restore(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let cfg: GenConfig = ck.meta_field(&format!("{prefix}config"))?;
        let params = ck.params(&format!("{prefix}param."));
        let noise: BTreeMap<String, _> = ck.params::<T>(&format!("{prefix}noise.")).iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        let g = Self { cfg, params, noise };
        // shape check against a fresh instance
        let fresh = Generator::<T>::new(g.cfg.clone(), 0)?;
        for (name, t) in fresh.params.iter() {
            if g.params.get(name)?.shape() != t.shape() {
                return Err(Error::Format(format!("generator array {name} has the wrong shape")));
            }
        }
        Ok(g)
    }
}

impl<T: Real> Discriminator<T> {
    pub fn store(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        ck.insert_params(&format!("{prefix}param."), &self.params);
        ck.set_meta(&format!("{prefix}config"), &self.cfg)?;
        Ok(())
    }

    pub fn restore(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let cfg: DiscConfig = ck.meta_field(&format!("{prefix}config"))?;
        cfg.validate()?;
        Ok(Self { cfg, params: ck.params(&format!("{prefix}param.")) })
    }
}

impl<T: Real> IdentityEmbedder<T> {
    pub fn store(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        ck.insert_params(&format!("{prefix}param."), &self.params);
        ck.set_meta(&format!("{prefix}config"), &self.cfg)?;
        Ok(())
    }

    pub fn restore(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let cfg: EmbedderConfig = ck.meta_field(&format!("{prefix}config"))?;
        Ok(Self { cfg, params: ck.params(&format!("{prefix}param.")) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::WPlus;
    use crate::tensor::Tensor;

    #[test]
    fn generator_round_trip() {
        let g = Generator::<f32>::new(GenConfig::default(), 3).unwrap();
        let mut ck = Checkpoint::new(0, "", serde_json::json!({}));
        g.store(&mut ck, "g.").unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let h = Generator::<f32>::restore(&back, "g.").unwrap();
        let w = WPlus(Tensor::full(&[10, 64], 0.1f32));
        assert_eq!(g.synthesize(&[&w]).unwrap(), h.synthesize(&[&w]).unwrap());
    }
}
