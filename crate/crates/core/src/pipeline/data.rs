use crate::error::{Error, Result};
use crate::metrics::{ExtractorKind, FeatureExtractor};
use crate::mimevis::{word_count, Granularity};
use crate::nncore::Tensor;
use crate::pipeline::config::ModelShape;
use crate::synthdata::Dataset;

/// Token count the text-side embedding is padded to; caption length is
/// measured against it.
pub const PADDED_TOKENS: usize = 77;

/// Number of leading target tokens a caption of `words` words fills.
pub fn active_tokens(token_count: usize, words: usize) -> usize {
    let k = (token_count * words).div_ceil(PADDED_TOKENS);
    k.clamp(1, token_count)
}

/// Zero every token row at or beyond `active`.
pub fn pad_target(full: &Tensor<f64>, active: usize) -> Tensor<f64> {
    let mut t = full.clone();
    for r in active..t.rows() {
        t.row_mut(r).fill(0.0);
    }
    t
}

/// Mean of each `factor x factor` block of a square image.
pub fn avg_pool_image(pixels: &[f64], side: usize, out_side: usize) -> Result<Vec<f64>> {
    if pixels.len() != side * side || out_side == 0 || side % out_side != 0 {
        return Err(Error::dim("avg_pool_image", &[side, side], &[out_side, out_side]));
    }
    let f = side / out_side;
    let norm = (f * f) as f64;
    let mut out = vec![0.0; out_side * out_side];
    for y in 0..side {
        for x in 0..side {
            out[(y / f) * out_side + x / f] += pixels[y * side + x] / norm;
        }
    }
    Ok(out)
}

/// Per-stimulus training targets for a list of stimulus ids, row-aligned.
#[derive(Debug, Clone)]
pub struct StimulusTable {
    pub ids: Vec<u64>,
    pub pixels: Tensor<f64>,
    pub labels: Tensor<f64>,
    /// Semantic targets at the chosen granularity, flattened per row.
    pub targets: Tensor<f64>,
    pub pooled: Tensor<f64>,
    pub deep_a: Tensor<f64>,
    pub deep_b: Tensor<f64>,
}

impl StimulusTable {
    pub fn build(dataset: &Dataset, ids: &[u64], granularity: Granularity, pooled_side: usize) -> Result<Self> {
        let cfg = dataset.config();
        let side = cfg.image_side;
        let deep_a = FeatureExtractor::new(ExtractorKind::DeepA, side)?;
        let deep_b = FeatureExtractor::new(ExtractorKind::DeepB, side)?;
        let mut rows = Rows::default();
        for &id in ids {
            let pixels = dataset.pixels_of(id)?;
            let full = dataset.target_of(id)?;
            let target = match granularity {
                Granularity::Full => full,
                g => {
                    let caption = dataset
                        .captions
                        .get(&id)
                        .and_then(|c| c.get(g))
                        .ok_or_else(|| Error::Data(format!("stimulus {id} has no `{g}` caption; run gen-captions first")))?;
                    pad_target(&full, active_tokens(cfg.token_count, word_count(caption)))
                }
            };
            rows.labels.push(dataset.labels_of(id)?.iter().map(|&b| f64::from(u8::from(b))).collect());
            rows.targets.push(target.into_data());
            rows.pooled.push(avg_pool_image(&pixels, side, pooled_side)?);
            rows.deep_a.push(deep_a.extract(&pixels)?);
            rows.deep_b.push(deep_b.extract(&pixels)?);
            rows.pixels.push(pixels);
        }
        if ids.is_empty() {
            return Err(Error::Data("no stimuli selected".into()));
        }
        Ok(Self {
            ids: ids.to_vec(),
            pixels: Tensor::from_rows(&rows.pixels)?,
            labels: Tensor::from_rows(&rows.labels)?,
            targets: Tensor::from_rows(&rows.targets)?,
            pooled: Tensor::from_rows(&rows.pooled)?,
            deep_a: Tensor::from_rows(&rows.deep_a)?,
            deep_b: Tensor::from_rows(&rows.deep_b)?,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Default)]
struct Rows {
    pixels: Vec<Vec<f64>>,
    labels: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    pooled: Vec<Vec<f64>>,
    deep_a: Vec<Vec<f64>>,
    deep_b: Vec<Vec<f64>>,
}

/// Gather `rows` of `t` in order.
pub fn gather_rows(t: &Tensor<f64>, rows: &[usize]) -> Tensor<f64> {
    let c = t.cols();
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::new(vec![rows.len(), c], data).expect("gathered shape")
}

/// Training split as per-subject voxel matrices plus aligned stimulus targets.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub shape: ModelShape,
    pub table: StimulusTable,
    /// Per subject, `n_train x Z_k`, row `i` answering stimulus `table.ids[i]`.
    pub voxels: Vec<Tensor<f64>>,
}

impl TrainingData {
    pub fn from_dataset(dataset: &Dataset, granularity: Granularity, pooled_side: usize) -> Result<Self> {
        let table = StimulusTable::build(dataset, &dataset.manifest.train_ids, granularity, pooled_side)?;
        let voxels = dataset.train_voxels.iter().map(|v| v.cast()).collect();
        Ok(Self {
            shape: ModelShape::from_world(dataset.config())?,
            table,
            voxels,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.voxels.len()
    }

    /// All `(subject, stimulus row)` pairs, stimulus-major.
    pub fn samples(&self) -> Vec<(usize, usize)> {
        (0..self.table.len())
            .flat_map(|i| (0..self.n_subjects()).map(move |k| (k, i)))
            .collect()
    }
}

/// Repetition-averaged test voxels per subject, `n_test x Z_k`.
pub fn averaged_test_voxels(dataset: &Dataset) -> Result<Vec<Tensor<f64>>> {
    (0..dataset.test_voxels.len())
        .map(|k| {
            let rows: Vec<Vec<f64>> = dataset.averaged_test(k)?.into_iter().map(|s| s.voxels).collect();
            Tensor::from_rows(&rows)
        })
        .collect()
}

/// Test voxels of a single repetition per subject.
pub fn single_repetition_test_voxels(dataset: &Dataset, repetition: usize) -> Result<Vec<Tensor<f64>>> {
    (0..dataset.test_voxels.len())
        .map(|k| {
            let rows = (0..dataset.n_test())
                .map(|i| {
                    let reps = dataset.test_repetitions(k, i)?;
                    reps.into_iter()
                        .nth(repetition)
                        .map(|s| s.voxels)
                        .ok_or_else(|| Error::Lookup {
                            kind: "repetition",
                            key: repetition.to_string(),
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            Tensor::from_rows(&rows)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_budget() {
        assert_eq!(active_tokens(8, 75), 8);
        assert_eq!(active_tokens(8, 30), 4);
        assert_eq!(active_tokens(8, 45), 5);
        assert_eq!(active_tokens(8, 60), 7);
        assert_eq!(active_tokens(8, 0), 1);
        assert_eq!(active_tokens(8, 500), 8);
    }

    #[test]
    fn padding_zeroes_tail_rows() {
        let full = Tensor::from_fn(&[3, 2], |i| i as f64 + 1.0);
        assert_eq!(pad_target(&full, 1).data(), &[1.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pooling_blocks() {
        let img: Vec<f64> = (0..16).map(f64::from).collect();
        assert_eq!(avg_pool_image(&img, 4, 2).unwrap(), vec![2.5, 4.5, 10.5, 12.5]);
        assert!(avg_pool_image(&img, 4, 3).is_err());
    }
}
