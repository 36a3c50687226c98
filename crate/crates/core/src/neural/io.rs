//! Parameter files: a safetensors container of `F64` tensors whose header
//! metadata carries the configuration and both vocabularies.
//!
//! The metadata is a single entry holding a JSON object with sorted keys, so
//! saving the same parameters twice gives byte-identical files.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use sha2::{Digest, Sha256};

use super::{NeuralConfig, NeuralParameters, Param, Tensor, Vocab};
use crate::error::{Error, Result};

const FORMAT: &str = "polyparse-neural/1";
const META_KEY: &str = "polyparse";

fn vocab_hash(v: &Vocab) -> String {
    let mut h = Sha256::new();
    for t in v.tokens() {
        h.update(t.as_bytes());
        h.update([0u8]);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn to_bytes(data: &[f64]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn save_parameters(params: &NeuralParameters, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = Param::ALL
        .iter()
        .map(|&p| {
            let t = params.tensor(p);
            (p.name().to_owned(), to_bytes(&t.data), vec![t.rows, t.cols])
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, b, shape)| {
            TensorView::new(Dtype::F64, shape.clone(), b)
                .map(|v| (name.as_str(), v))
                .map_err(|e| Error::Model(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;

    let fields: BTreeMap<&str, String> = BTreeMap::from([
        ("format", FORMAT.to_owned()),
        ("config", json(&params.config)),
        ("source_vocab", json(params.source_vocab.tokens())),
        ("target_vocab", json(params.target_vocab.tokens())),
        ("source_vocab_sha256", vocab_hash(&params.source_vocab)),
        ("target_vocab_sha256", vocab_hash(&params.target_vocab)),
    ]);
    let meta = HashMap::from([(META_KEY.to_owned(), json(&fields))]);

    let buf = safetensors::serialize(views, Some(meta)).map_err(|e| Error::Model(e.to_string()))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn json<T: serde::Serialize + ?Sized>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

pub fn load_parameters(path: impl AsRef<Path>) -> Result<NeuralParameters> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::parse(path, 0, m);
    let (_, header) = SafeTensors::read_metadata(&buf).map_err(|e| bad(e.to_string()))?;
    let meta: BTreeMap<String, String> = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .map(|m| serde_json::from_str(m).map_err(|e| bad(e.to_string())))
        .transpose()?
        .unwrap_or_default();
    let field = |k: &str| meta.get(k).ok_or_else(|| bad(format!("missing `{k}` in header")));
    if field("format")? != FORMAT {
        return Err(bad(format!("not a {FORMAT} file")));
    }
    let config: NeuralConfig = serde_json::from_str(field("config")?).map_err(|e| bad(e.to_string()))?;
    let vocab = |k: &str| -> Result<Vocab> {
        let tokens: Vec<String> = serde_json::from_str(field(k)?).map_err(|e| bad(e.to_string()))?;
        let v = Vocab::new(tokens)?;
        if &vocab_hash(&v) != field(&format!("{k}_sha256"))? {
            return Err(bad(format!("{k} does not match its hash")));
        }
        Ok(v)
    };
    let source_vocab = vocab("source_vocab")?;
    let target_vocab = vocab("target_vocab")?;

    let st = SafeTensors::deserialize(&buf).map_err(|e| bad(e.to_string()))?;
    let mut tensors = Vec::with_capacity(Param::ALL.len());
    for p in Param::ALL {
        let view = st.tensor(p.name()).map_err(|e| bad(format!("{}: {e}", p.name())))?;
        if view.dtype() != Dtype::F64 || view.shape().len() != 2 {
            return Err(bad(format!("{} is not a 2-d F64 tensor", p.name())));
        }
        let data = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        tensors.push(Tensor { rows: view.shape()[0], cols: view.shape()[1], data });
    }
    let params = NeuralParameters { config, source_vocab, target_vocab, tensors };
    params.validate().map_err(|e| bad(e.to_string()))?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Pair, ParallelCorpus};

    #[test]
    fn round_trip_is_bit_exact() {
        let corpus = ParallelCorpus::from_pairs(vec![Pair::new(
            vec!["a".into(), "b".into()],
            vec!["c".into()],
            Some("L".into()),
        )
        .unwrap()]);
        let config = NeuralConfig { embedding: 3, hidden: 2, attention: 2, mlp: 2, copy: true, ..Default::default() };
        let mut p = NeuralParameters::new(config, &corpus).unwrap();
        p.tensor_mut(Param::OutputB).data[0] = f64::MIN_POSITIVE / 3.0;
        let dir = std::env::temp_dir().join(format!("polyparse-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let file = dir.join("model.safetensors");
        save_parameters(&p, &file).unwrap();
        let q = load_parameters(&file).unwrap();
        let again = dir.join("again.safetensors");
        save_parameters(&q, &again).unwrap();
        assert_eq!(fs::read(&file).unwrap(), fs::read(&again).unwrap());
        assert_eq!(p.config, q.config);
        assert_eq!(p.source_vocab, q.source_vocab);
        for (a, b) in p.tensors.iter().zip(&q.tensors) {
            assert_eq!(a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
        fs::write(&file, b"junk").unwrap();
        assert!(load_parameters(&file).is_err());
        fs::remove_dir_all(dir).unwrap();
    }
}
