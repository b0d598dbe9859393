//! Saving and restoring trained models.

use super::model::{Model, ModelConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

pub const NEURAL_KIND: &str = "neural";

impl Model<f32> {
    pub fn to_checkpoint(&self, part_names: &[String]) -> Checkpoint {
        let mut ck = Checkpoint::new(NEURAL_KIND);
        for (k, v) in self.config.to_pairs() {
            ck.meta.push((k.to_string(), v));
        }
        ck.meta.push(("part_names".into(), part_names.join("|")));
        ck.tensors = self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        ck
    }

    /// Rebuilds the model and returns it with its part names.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Vec<String>)> {
        if ck.kind != NEURAL_KIND {
            return Err(Error::Checkpoint(format!("expected a {NEURAL_KIND} checkpoint, found {:?}", ck.kind)));
        }
        let mut config = ModelConfig::default();
        let mut names = Vec::new();
        for (k, v) in &ck.meta {
            if k == "part_names" {
                names = v.split('|').map(str::to_string).collect();
            } else {
                config.set(k, v)?;
            }
        }
        let mut model = Model::<f32>::new(config, 0)?;
        if ck.tensors.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, architecture has {}",
                ck.tensors.len(),
                model.params.len()
            )));
        }
        for (name, tensor) in &ck.tensors {
            let id = model
                .params
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
            let slot = model.params.get_mut(id);
            if slot.dim() != tensor.dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    tensor.dim(),
                    slot.dim()
                )));
            }
            slot.assign(tensor);
        }
        if names.len() != config.num_parts {
            names = (1..=config.num_parts).map(|k| format!("part {k}")).collect();
        }
        Ok((model, names))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::Arch;

    #[test]
    fn checkpoint_restores_identical_parameters() {
        for arch in Arch::ALL {
            let mut config = ModelConfig::new(arch, 3);
            config.hidden = 16;
            config.heads = 4;
            config.features.use_duration = true;
            let model = Model::<f32>::new(config, 4).unwrap();
            let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
            let mut buf = Vec::new();
            model.to_checkpoint(&names).write(&mut buf).unwrap();
            let (back, back_names) = Model::from_checkpoint(&Checkpoint::read(&buf[..]).unwrap()).unwrap();
            assert_eq!(back.params, model.params);
            assert_eq!(back.config, model.config);
            assert_eq!(back_names, names);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let model = Model::<f32>::new(ModelConfig::new(Arch::Lstm, 3), 0).unwrap();
        let mut ck = model.to_checkpoint(&[]);
        ck.tensors[0].1 = ndarray::Array2::zeros((1, 1));
        assert!(Model::from_checkpoint(&ck).is_err());
        ck.kind = "zones".into();
        assert!(Model::from_checkpoint(&ck).is_err());
    }
}
