//! Retrieval metrics: cosine ranking, CMC Rank@k and mAP with same-camera
//! junk filtering, embedding files and density sweeps.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{uniform_subsample, PointCloud};
use crate::model::{batch_input, OgNet};
use crate::tensor::Tensor;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"OGEB";
/// Identity of distractor entries; never a positive match.
pub const DISTRACTOR: i64 = -1;
pub const SWEEP_FRACTIONS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

fn rows(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        &[n, d] => Ok((n, d)),
        s => Err(Error::Shape(format!("expected [n, dim] features, got {s:?}"))),
    }
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize(features: &Tensor) -> Result<Tensor> {
    let (_, d) = rows(features)?;
    let mut out = features.clone();
    if d == 0 {
        return Ok(out);
    }
    for (i, row) in out.data_mut().chunks_exact_mut(d).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Numeric(format!("row {i} has norm {norm}")));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

/// Gallery indices by descending dot product with `query`; equal scores keep
/// ascending index order.
pub fn rank_gallery(query: &[f64], gallery: &Tensor) -> Result<Vec<usize>> {
    let (n, d) = rows(gallery)?;
    if query.len() != d {
        return Err(Error::Dimension {
            op: "rank_gallery",
            lhs: vec![query.len()],
            rhs: vec![n, d],
        });
    }
    let scores: Vec<f64> = if d == 0 {
        vec![0.0; n]
    } else {
        gallery
            .data()
            .chunks_exact(d)
            .map(|g| g.iter().zip(query).map(|(a, b)| a * b).sum())
            .collect()
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order)
}

/// Mean precision at each true match of a junk-free ranking; `None` without
/// any match.
pub fn average_precision(hits: &[bool]) -> Option<f64> {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (i, &h) in hits.iter().enumerate() {
        if h {
            found += 1;
            sum += found as f64 / (i + 1) as f64;
        }
    }
    (found > 0).then(|| sum / found as f64)
}

/// Features with the identity and camera of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub features: Tensor,
    pub identities: Vec<i64>,
    pub cameras: Vec<i64>,
}

impl EmbeddingSet {
    pub fn new(features: Tensor, identities: Vec<i64>, cameras: Vec<i64>) -> Result<Self> {
        let (n, _) = rows(&features)?;
        if identities.len() != n || cameras.len() != n {
            return Err(Error::Shape(format!(
                "{n} feature rows but {} identities and {} cameras",
                identities.len(),
                cameras.len()
            )));
        }
        Ok(Self {
            features,
            identities,
            cameras,
        })
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.dim();
        w.write_all(EMBEDDING_MAGIC)?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        w.write_all(&(d as u32).to_le_bytes())?;
        for i in 0..self.len() {
            for v in &self.features.data()[i * d..(i + 1) * d] {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
            w.write_all(&(self.identities[i] as i32).to_le_bytes())?;
            w.write_all(&(self.cameras[i] as i32).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut offset = 0u64;
        let mut take = |r: &mut R, buf: &mut [u8], what: &str| -> Result<()> {
            r.read_exact(buf).map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => Error::Format {
                    offset,
                    msg: format!("truncated {what}"),
                },
                _ => Error::Io(e),
            })?;
            offset += buf.len() as u64;
            Ok(())
        };
        let mut head = [0u8; 12];
        take(&mut r, &mut head[..4], "magic")?;
        if &head[..4] != EMBEDDING_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad magic {:?}", &head[..4]),
            });
        }
        take(&mut r, &mut head[4..], "header")?;
        let n = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes")) as usize;
        let d = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize;
        let mut record = vec![0u8; 4 * d + 8];
        let mut features = Vec::with_capacity(n * d);
        let mut identities = Vec::with_capacity(n);
        let mut cameras = Vec::with_capacity(n);
        let le = |b: &[u8]| <[u8; 4]>::try_from(b).expect("4 bytes");
        for _ in 0..n {
            take(&mut r, &mut record, "record")?;
            features.extend(record[..4 * d].chunks_exact(4).map(|b| f32::from_le_bytes(le(b)) as f64));
            identities.push(i32::from_le_bytes(le(&record[4 * d..4 * d + 4])) as i64);
            cameras.push(i32::from_le_bytes(le(&record[4 * d + 4..])) as i64);
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Format {
                offset,
                msg: "trailing bytes after last record".into(),
            });
        }
        Self::new(Tensor::new(vec![n, d], features)?, identities, cameras)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    /// Queries with at least one valid match.
    pub queries: usize,
    /// Queries excluded for lack of a valid match.
    pub skipped: usize,
}

impl RetrievalReport {
    /// `metric<TAB>value` lines.
    pub fn to_tsv(&self) -> String {
        format!(
            "rank1\t{:.6}\nrank5\t{:.6}\nrank10\t{:.6}\nmAP\t{:.6}\nqueries\t{}\nskipped\t{}\n",
            self.rank1, self.rank5, self.rank10, self.map, self.queries, self.skipped
        )
    }
}

/// Per-query match flags over the gallery ranking with junk entries (same
/// identity, same camera) removed.
pub fn query_hits(query: &EmbeddingSet, q: usize, gallery: &EmbeddingSet, order: &[usize]) -> Vec<bool> {
    let (id, cam) = (query.identities[q], query.cameras[q]);
    order
        .iter()
        .filter(|&&g| !(gallery.identities[g] == id && gallery.cameras[g] == cam))
        .map(|&g| id != DISTRACTOR && gallery.identities[g] == id)
        .collect()
}

/// Cosine-similarity retrieval of every query against the gallery.
pub fn evaluate(query: &EmbeddingSet, gallery: &EmbeddingSet) -> Result<RetrievalReport> {
    if query.dim() != gallery.dim() {
        return Err(Error::Dimension {
            op: "evaluate",
            lhs: query.features.shape().to_vec(),
            rhs: gallery.features.shape().to_vec(),
        });
    }
    let qf = l2_normalize(&query.features)?;
    let gf = l2_normalize(&gallery.features)?;
    let d = query.dim();
    let mut cmc = [0usize; 3];
    let mut ap_sum = 0.0;
    let mut valid = 0;
    for q in 0..query.len() {
        let order = rank_gallery(&qf.data()[q * d..(q + 1) * d], &gf)?;
        let hits = query_hits(query, q, gallery, &order);
        let Some(ap) = average_precision(&hits) else {
            continue;
        };
        valid += 1;
        ap_sum += ap;
        let first = hits.iter().position(|&h| h).expect("ap implies a hit");
        for (slot, k) in cmc.iter_mut().zip([1, 5, 10]) {
            *slot += usize::from(first < k);
        }
    }
    let mean = |v: f64| if valid == 0 { 0.0 } else { v / valid as f64 };
    Ok(RetrievalReport {
        rank1: mean(cmc[0] as f64),
        rank5: mean(cmc[1] as f64),
        rank10: mean(cmc[2] as f64),
        map: mean(ap_sum),
        queries: valid,
        skipped: query.len() - valid,
    })
}

/// Eval-mode embeddings of `fraction`-subsampled clouds, `batch` at a time.
/// Subsampling seeds come from `seed` in cloud order.
pub fn embed(net: &OgNet, clouds: &[PointCloud], fraction: f64, seed: u64, batch: usize) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = net.config().embedding_dim;
    let mut data = Vec::with_capacity(clouds.len() * dim);
    for chunk in clouds.chunks(batch.max(1)) {
        let samples = chunk
            .iter()
            .map(|c| uniform_subsample(c, fraction, rng.random()))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&PointCloud> = samples.iter().collect();
        data.extend_from_slice(net.extract_embedding(&batch_input(&refs)?)?.data());
    }
    Tensor::new(vec![clouds.len(), dim], data)
}

/// Clouds with their identity and camera labels.
#[derive(Debug, Clone, Copy)]
pub struct LabeledClouds<'a> {
    pub clouds: &'a [PointCloud],
    pub identities: &'a [i64],
    pub cameras: &'a [i64],
}

impl LabeledClouds<'_> {
    pub fn embed(&self, net: &OgNet, fraction: f64, seed: u64, batch: usize) -> Result<EmbeddingSet> {
        EmbeddingSet::new(
            embed(net, self.clouds, fraction, seed, batch)?,
            self.identities.to_vec(),
            self.cameras.to_vec(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub fraction: f64,
    pub rank1: f64,
    pub map: f64,
}

/// Retrieval quality with query and gallery clouds subsampled to each
/// fraction of their points.
pub fn density_sweep(
    net: &OgNet,
    query: LabeledClouds<'_>,
    gallery: LabeledClouds<'_>,
    fractions: &[f64],
    seed: u64,
    batch: usize,
) -> Result<Vec<SweepRow>> {
    fractions
        .iter()
        .map(|&fraction| {
            let q = query.embed(net, fraction, seed, batch)?;
            let g = gallery.embed(net, fraction, seed ^ 0x5eed, batch)?;
            let r = evaluate(&q, &g)?;
            Ok(SweepRow {
                fraction,
                rank1: r.rank1,
                map: r.map,
            })
        })
        .collect()
}

pub fn sweep_to_tsv(rows: &[SweepRow]) -> String {
    let mut out = String::from("fraction\trank1\tmAP\n");
    for r in rows {
        out.push_str(&format!("{}\t{:.6}\t{:.6}\n", r.fraction, r.rank1, r.map));
    }
    out
}
