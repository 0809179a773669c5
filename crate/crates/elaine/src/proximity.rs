//! Walk-based higher-order proximity plus two closed-form proximity indices
//! (Katz, common neighbors) used to sanity-check it.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{ElaineError, Result};
use crate::graph::Graph;

/// Parameters of the random-walk proximity estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WalkConfig {
    /// Walks started from every node.
    pub walks_per_node: usize,
    /// Steps per walk; the start node itself is not counted as a visit.
    pub walk_length: usize,
    pub seed: u64,
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig {
            walks_per_node: 10,
            walk_length: 5,
            seed: 0,
        }
    }
}

/// One random walk from `start`: `length` uniform steps over the neighbor
/// lists (edge weights are deliberately ignored). Returns the visited nodes in
/// order, excluding `start`; an isolated start yields an empty walk.
pub fn random_walk(g: &Graph, start: usize, length: usize, rng: &mut impl Rng) -> Vec<usize> {
    if g.degree(start) == 0 {
        return Vec::new();
    }
    let mut walk = Vec::with_capacity(length);
    let mut cur = start;
    for _ in 0..length {
        let nbrs = g.neighbors(cur);
        cur = nbrs[rng.gen_range(0..nbrs.len())].0;
        walk.push(cur);
    }
    walk
}

/// Row-stochastic visit-frequency matrix estimated from truncated random
/// walks. `S[i][j]` is the fraction of the `walks_per_node * walk_length`
/// visited positions (over all walks from `i`) that landed on `j`.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub matrix: Array2<f64>,
    pub config: WalkConfig,
    pub graph_hash: String,
}

impl SimilarityMatrix {
    pub fn matches(&self, g: &Graph, cfg: &WalkConfig) -> bool {
        self.config == *cfg && self.graph_hash == g.structure_hash()
    }
}

/// Estimate the visit-frequency matrix. Each start node owns an independent
/// RNG stream derived from `(seed, node id)`, so results are identical no
/// matter how the per-node work is scheduled.
pub fn build_similarity(g: &Graph, cfg: &WalkConfig) -> Result<SimilarityMatrix> {
    if cfg.walks_per_node == 0 || cfg.walk_length == 0 {
        return Err(ElaineError::Validation(
            "walks_per_node and walk_length must be at least 1".into(),
        ));
    }
    let n = g.num_nodes();
    let denom = (cfg.walks_per_node * cfg.walk_length) as f64;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut counts = vec![0u64; n];
            if g.degree(i) > 0 {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(i as u64);
                for _ in 0..cfg.walks_per_node {
                    for v in random_walk(g, i, cfg.walk_length, &mut rng) {
                        counts[v] += 1;
                    }
                }
            }
            counts.into_iter().map(|c| c as f64 / denom).collect()
        })
        .collect();

    let mut matrix = Array2::zeros((n, n));
    for (i, row) in rows.into_iter().enumerate() {
        for (j, x) in row.into_iter().enumerate() {
            matrix[[i, j]] = x;
        }
    }
    Ok(SimilarityMatrix {
        matrix,
        config: *cfg,
        graph_hash: g.structure_hash(),
    })
}

const SIM_CACHE_MAGIC: &[u8; 4] = b"ELSC";
const SIM_CACHE_VERSION: u32 = 1;

impl SimilarityMatrix {
    /// Persist as a binary blob keyed by `(graph hash, walk config)`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(SIM_CACHE_MAGIC);
        buf.write_u32::<LittleEndian>(SIM_CACHE_VERSION).unwrap();
        let hash = self.graph_hash.as_bytes();
        buf.write_u32::<LittleEndian>(hash.len() as u32).unwrap();
        buf.extend_from_slice(hash);
        buf.write_u64::<LittleEndian>(self.config.walks_per_node as u64)
            .unwrap();
        buf.write_u64::<LittleEndian>(self.config.walk_length as u64)
            .unwrap();
        buf.write_u64::<LittleEndian>(self.config.seed).unwrap();
        buf.write_u64::<LittleEndian>(self.matrix.nrows() as u64)
            .unwrap();
        for &x in self.matrix.iter() {
            buf.write_f64::<LittleEndian>(x).unwrap();
        }
        // Write-then-rename so concurrent readers never see a torn file.
        let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
        fs::write(&tmp, buf).map_err(|e| ElaineError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| ElaineError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SimilarityMatrix> {
        let path = path.as_ref();
        let data = fs::read(path).map_err(|e| ElaineError::io(path, e))?;
        let mut cur = std::io::Cursor::new(data);
        let bad = |msg: &str| ElaineError::Checkpoint(format!("{}: {msg}", path.display()));

        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic)
            .map_err(|_| bad("truncated header"))?;
        if &magic != SIM_CACHE_MAGIC {
            return Err(bad("not a similarity cache file"));
        }
        let version = cur
            .read_u32::<LittleEndian>()
            .map_err(|_| bad("truncated header"))?;
        if version != SIM_CACHE_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hash_len = cur
            .read_u32::<LittleEndian>()
            .map_err(|_| bad("truncated header"))? as usize;
        let mut hash = vec![0u8; hash_len];
        cur.read_exact(&mut hash)
            .map_err(|_| bad("truncated hash"))?;
        let graph_hash = String::from_utf8(hash).map_err(|_| bad("graph hash is not utf-8"))?;
        let walks_per_node = cur
            .read_u64::<LittleEndian>()
            .map_err(|_| bad("truncated header"))? as usize;
        let walk_length = cur
            .read_u64::<LittleEndian>()
            .map_err(|_| bad("truncated header"))? as usize;
        let seed = cur
            .read_u64::<LittleEndian>()
            .map_err(|_| bad("truncated header"))?;
        let n = cur
            .read_u64::<LittleEndian>()
            .map_err(|_| bad("truncated header"))? as usize;
        let mut values = Vec::with_capacity(n * n);
        for _ in 0..n * n {
            values.push(
                cur.read_f64::<LittleEndian>()
                    .map_err(|_| bad("truncated matrix data"))?,
            );
        }
        let matrix =
            Array2::from_shape_vec((n, n), values).map_err(|_| bad("matrix shape mismatch"))?;
        Ok(SimilarityMatrix {
            matrix,
            config: WalkConfig {
                walks_per_node,
                walk_length,
                seed,
            },
            graph_hash,
        })
    }
}

fn cache_file(dir: &Path, g: &Graph, cfg: &WalkConfig) -> PathBuf {
    dir.join(format!(
        "walks-{}-k{}-l{}-s{}.bin",
        g.structure_hash(),
        cfg.walks_per_node,
        cfg.walk_length,
        cfg.seed
    ))
}

/// Like [`build_similarity`], but reuses a matching matrix from `cache_dir`
/// when one exists and writes the freshly built one there otherwise.
pub fn build_similarity_cached(
    g: &Graph,
    cfg: &WalkConfig,
    cache_dir: Option<&Path>,
) -> Result<SimilarityMatrix> {
    let Some(dir) = cache_dir else {
        return build_similarity(g, cfg);
    };
    let file = cache_file(dir, g, cfg);
    if file.exists() {
        match SimilarityMatrix::load(&file) {
            Ok(cached) if cached.matches(g, cfg) => {
                log::info!("reusing cached walk matrix {}", file.display());
                return Ok(cached);
            }
            Ok(_) => {}
            Err(e) => log::warn!("ignoring unreadable walk cache: {e}"),
        }
    }
    let sim = build_similarity(g, cfg)?;
    fs::create_dir_all(dir).map_err(|e| ElaineError::io(dir, e))?;
    sim.save(&file)?;
    Ok(sim)
}

/// Katz index `sum_{t>=1} beta^t A^t = (I - beta A)^{-1} - I` on the binary
/// adjacency. Requires `beta * rho(A) < 1`.
pub fn katz_index(g: &Graph, beta: f64) -> Result<Array2<f64>> {
    if !beta.is_finite() || beta <= 0.0 {
        return Err(ElaineError::Validation(format!(
            "katz decay must be positive, got {beta}"
        )));
    }
    let a = g.binary_adjacency();
    let rho = spectral_radius(&a);
    if beta * rho >= 1.0 - 1e-9 {
        return Err(ElaineError::Validation(format!(
            "katz series diverges: beta {beta} * spectral radius {rho:.6} >= 1"
        )));
    }
    let n = g.num_nodes();
    let mut m = Array2::eye(n);
    m -= &(beta * &a);
    let inv = invert(&m)?;
    Ok(inv - Array2::<f64>::eye(n))
}

/// Number of shared neighbors for every node pair (zero diagonal), computed
/// by merging sorted neighbor lists.
pub fn common_neighbors(g: &Graph) -> Array2<f64> {
    let n = g.num_nodes();
    let mut cn = Array2::zeros((n, n));
    for u in 0..n {
        for v in (u + 1)..n {
            let mut count = 0usize;
            let (mut i, mut j) = (0usize, 0usize);
            let (nu, nv) = (g.neighbors(u), g.neighbors(v));
            while i < nu.len() && j < nv.len() {
                match nu[i].0.cmp(&nv[j].0) {
                    std::cmp::Ordering::Less => i += 1,
                    std::cmp::Ordering::Greater => j += 1,
                    std::cmp::Ordering::Equal => {
                        count += 1;
                        i += 1;
                        j += 1;
                    }
                }
            }
            cn[[u, v]] = count as f64;
            cn[[v, u]] = count as f64;
        }
    }
    cn
}

/// Largest eigenvalue magnitude of a symmetric matrix, via power iteration on
/// `A^2` (positive semidefinite, so the iteration cannot oscillate).
fn spectral_radius(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    let a2 = a.dot(a);
    // Slightly uneven start vector avoids being orthogonal to the top
    // eigenspace on symmetric graphs.
    let mut x = Array1::from_shape_fn(n, |i| 1.0 + 1e-3 * i as f64);
    let norm = |v: &Array1<f64>| v.iter().map(|t| t * t).sum::<f64>().sqrt();
    let mut rho_sq = 0.0f64;
    for _ in 0..500 {
        let y = a2.dot(&x);
        let ny = norm(&y);
        if ny == 0.0 {
            return 0.0;
        }
        let next_rho_sq = ny / norm(&x);
        x = y / ny;
        if (next_rho_sq - rho_sq).abs() <= 1e-13 * next_rho_sq.max(1.0) {
            rho_sq = next_rho_sq;
            break;
        }
        rho_sq = next_rho_sq;
    }
    rho_sq.sqrt()
}

/// Dense inverse by Gauss-Jordan elimination with partial pivoting.
fn invert(m: &Array2<f64>) -> Result<Array2<f64>> {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "invert expects a square matrix");
    let mut a: Vec<f64> = m.iter().copied().collect();
    let mut inv: Vec<f64> = Array2::<f64>::eye(n).iter().copied().collect();
    let idx = |r: usize, c: usize| r * n + c;

    for col in 0..n {
        let mut piv = col;
        for r in (col + 1)..n {
            if a[idx(r, col)].abs() > a[idx(piv, col)].abs() {
                piv = r;
            }
        }
        if a[idx(piv, col)].abs() < 1e-12 {
            return Err(ElaineError::Validation(
                "matrix is singular to working precision".into(),
            ));
        }
        if piv != col {
            for c in 0..n {
                a.swap(idx(col, c), idx(piv, c));
                inv.swap(idx(col, c), idx(piv, c));
            }
        }
        let d = a[idx(col, col)];
        for c in 0..n {
            a[idx(col, c)] /= d;
            inv[idx(col, c)] /= d;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[idx(r, col)];
            if f == 0.0 {
                continue;
            }
            for c in 0..n {
                a[idx(r, c)] -= f * a[idx(col, c)];
                inv[idx(r, c)] -= f * inv[idx(col, c)];
            }
        }
    }
    Ok(Array2::from_shape_vec((n, n), inv).unwrap())
}
