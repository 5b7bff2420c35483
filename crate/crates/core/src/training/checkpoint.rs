use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tensor};
use crate::dataio::ParamRanges;
use crate::deformation::FrameGeometry;
use crate::error::{Error, Result};
use crate::headmodel::{BlendshapeModel, HeadParams};
use crate::model::{FrameInput, NetworkConfig, PortraitModel};
use crate::rendering::Camera;

use super::TrainConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.rnck";
/// The morphable model travels next to the checkpoint under this name.
pub const MODEL_FILE: &str = "model.rnrf";

const MAGIC: &[u8; 4] = b"RNCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub index: usize,
    pub camera: Camera,
    pub params: HeadParams,
    pub holdout: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub seed: u64,
    pub train_config: TrainConfig,
    pub network: NetworkConfig,
    /// Content hash of the morphable model the networks were trained against.
    pub model_hash: String,
    pub width: u32,
    pub height: u32,
    pub frames: Vec<FrameMeta>,
    pub param_ranges: ParamRanges,
    /// Deformation encoding window at `step`.
    pub window_alpha: f64,
}

impl CheckpointMeta {
    /// First frame used for training; its codes drive renders of unseen parameters.
    pub fn reference_frame(&self) -> usize {
        self.frames.iter().find(|f| !f.holdout).map_or(0, |f| f.index)
    }

    pub fn holdout_frames(&self) -> Vec<usize> {
        self.frames.iter().filter(|f| f.holdout).map(|f| f.index).collect()
    }
}

/// Network weights, code tables and the metadata needed to render from them.
///
/// Layout: `RNCK`, version (u32), metadata length (u32) and JSON, tensor count
/// (u32), then per tensor its name length (u32), UTF-8 name, rows and cols (u32)
/// and `rows·cols` f32 values. All integers and floats are little-endian.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet<f32>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::param("checkpoint field exceeds 32 bits"))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated checkpoint")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::param(format!("checkpoint metadata: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION as usize)?;
        put_u32(&mut out, meta.len())?;
        out.extend_from_slice(&meta);
        put_u32(&mut out, self.params.len())?;
        for (_, name, t) in self.params.iter() {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rows())?;
            put_u32(&mut out, t.cols())?;
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let meta_len = r.u32()?;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| format!("checkpoint metadata: {e}"))?;
        let count = r.u32()?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let len = r.u32()?;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| "tensor name is not UTF-8")?.to_string();
            if params.find(&name).is_some() {
                return Err(format!("duplicate tensor {name}"));
            }
            let (rows, cols) = (r.u32()?, r.u32()?);
            let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(4)).ok_or("tensor size overflow")?;
            let data = r.take(n)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            params.add(name, Tensor::from_vec(rows, cols, data));
        }
        if r.pos != bytes.len() {
            return Err("trailing bytes after tensor table".into());
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|m| Error::format(path, m))
    }

    /// Writes the checkpoint and its morphable model into `dir`.
    pub fn save_dir(&self, dir: &Path, head: &BlendshapeModel) -> Result<()> {
        if head.content_hash() != self.meta.model_hash {
            return Err(Error::param("morphable model does not match the checkpoint hash"));
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        head.save(&dir.join(MODEL_FILE))?;
        self.save(&dir.join(CHECKPOINT_FILE))
    }

    /// Loads a checkpoint directory (or a checkpoint file with the model beside it).
    pub fn load_dir(path: &Path) -> Result<(Self, BlendshapeModel)> {
        let (file, dir) = if path.is_dir() {
            (path.join(CHECKPOINT_FILE), path.to_path_buf())
        } else {
            (path.to_path_buf(), path.parent().unwrap_or(Path::new(".")).to_path_buf())
        };
        let ck = Self::load(&file)?;
        let head = BlendshapeModel::load(&dir.join(MODEL_FILE))?;
        if head.content_hash() != ck.meta.model_hash {
            return Err(Error::format(&file, "morphable model hash does not match"));
        }
        Ok((ck, head))
    }

    pub fn model(&self) -> Result<PortraitModel> {
        PortraitModel::from_params(self.meta.network.clone(), self.meta.frames.len(), self.params.clone())
    }

    /// Conditioning for arbitrary parameters using the codes of `code_frame`.
    pub fn frame_input(
        &self,
        model: &PortraitModel,
        head: &BlendshapeModel,
        params: &HeadParams,
        code_frame: usize,
    ) -> Result<FrameInput> {
        if code_frame >= model.num_frames() {
            return Err(Error::param(format!("frame {code_frame} out of range")));
        }
        params.validate(head.num_expressions())?;
        let geometry = Arc::new(FrameGeometry::from_model(head, params)?);
        Ok(FrameInput::new(geometry, params.clone(), model.deform_code(code_frame), model.appear_code(code_frame)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synthetic_head, ParamRanges};

    fn sample() -> (Checkpoint, BlendshapeModel) {
        let head = synthetic_head(3, 5).unwrap().quantized().unwrap();
        let cfg = TrainConfig { network: NetworkConfig::tiny(3, 8, 8), ..Default::default() };
        let net = cfg.network_for(3);
        let model = PortraitModel::new(net.clone(), 2, 9).unwrap();
        let cam = crate::dataio::synth_camera(0.1, 0.0, 8, 8).unwrap();
        let params = HeadParams::zeros(3);
        let meta = CheckpointMeta {
            step: 12,
            seed: 3,
            train_config: cfg,
            network: net,
            model_hash: head.content_hash(),
            width: 8,
            height: 8,
            frames: (0..2)
                .map(|i| FrameMeta { index: i, camera: cam.clone(), params: params.clone(), holdout: i == 1 })
                .collect(),
            param_ranges: ParamRanges::from_params(3, [&params]),
            window_alpha: 0.1 + 0.2,
        };
        (Checkpoint { meta, params: model.params }, head)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (ck, head) = sample();
        let dir = tempfile::tempdir().unwrap();
        ck.save_dir(dir.path(), &head).unwrap();
        let first = std::fs::read(dir.path().join(CHECKPOINT_FILE)).unwrap();
        let (back, _) = Checkpoint::load_dir(dir.path()).unwrap();
        assert_eq!(back, ck);
        let again = dir.path().join("again.rnck");
        back.save(&again).unwrap();
        assert_eq!(std::fs::read(again).unwrap(), first);
        assert_eq!(&first[..4], b"RNCK");
        back.model().unwrap();
        assert_eq!(back.meta.reference_frame(), 0);
        assert_eq!(back.meta.holdout_frames(), vec![1]);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let (ck, head) = sample();
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let other = synthetic_head(3, 6).unwrap().quantized().unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(ck.save_dir(dir.path(), &other).is_err());
        ck.save_dir(dir.path(), &head).unwrap();
        other.save(&dir.path().join(MODEL_FILE)).unwrap();
        assert!(Checkpoint::load_dir(dir.path()).is_err());
    }
}
