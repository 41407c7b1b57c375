//! The N×V working matrix and its site bookkeeping.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::mask::{Mask, VolumeGeometry};
use crate::nifti::Volume;
use crate::table::SampleTable;

/// Sites in order of first appearance, with per-row membership.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteLayout {
    sites: Vec<String>,
    counts: Vec<usize>,
    membership: Vec<usize>,
}

impl SiteLayout {
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut sites: Vec<String> = Vec::new();
        let mut counts = Vec::new();
        let mut membership = Vec::new();
        for label in labels {
            let idx = match sites.iter().position(|s| s == label) {
                Some(i) => i,
                None => {
                    sites.push(label.to_string());
                    counts.push(0);
                    sites.len() - 1
                }
            };
            counts[idx] += 1;
            membership.push(idx);
        }
        if sites.is_empty() {
            return Err(Error::Dataset("no samples".into()));
        }
        Ok(Self {
            sites,
            counts,
            membership,
        })
    }

    pub fn from_table(table: &SampleTable) -> Result<Self> {
        Self::from_labels(table.rows().iter().map(|r| r.site.as_str()))
    }

    pub fn sites(&self) -> &[String] {
        &self.sites
    }

    /// Per-site sample counts n_i.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Site index of each row.
    pub fn membership(&self) -> &[usize] {
        &self.membership
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn n_samples(&self) -> usize {
        self.membership.len()
    }

    pub fn index_of(&self, site: &str) -> Option<usize> {
        self.sites.iter().position(|s| s == site)
    }

    /// Row indices of each site, in row order.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.sites.len()];
        for (row, &s) in self.membership.iter().enumerate() {
            groups[s].push(row);
        }
        groups
    }
}

/// Subjects × masked voxels, plus everything needed to map back to volumes.
#[derive(Debug, Clone)]
pub struct VoxelDataset {
    values: Array2<f64>,
    mask: Mask,
    table: SampleTable,
    layout: SiteLayout,
}

impl VoxelDataset {
    pub fn new(values: Array2<f64>, mask: Mask, table: SampleTable) -> Result<Self> {
        if values.nrows() != table.len() {
            return Err(Error::Dataset(format!(
                "{} value rows for {} table rows",
                values.nrows(),
                table.len()
            )));
        }
        if values.ncols() != mask.len() {
            return Err(Error::Dataset(format!(
                "{} value columns for {} masked voxels",
                values.ncols(),
                mask.len()
            )));
        }
        for ((n, k), v) in values.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    image_id: table.rows()[n].image_id.clone(),
                    voxel_index: mask.voxel_index()[k],
                });
            }
        }
        let layout = SiteLayout::from_table(&table)?;
        Ok(Self {
            values,
            mask,
            table,
            layout,
        })
    }

    /// Same samples and mask with a new value matrix (e.g. harmonized output).
    pub fn with_values(&self, values: Array2<f64>) -> Result<Self> {
        Self::new(values, self.mask.clone(), self.table.clone())
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn geometry(&self) -> &VolumeGeometry {
        self.mask.geometry()
    }

    pub fn table(&self) -> &SampleTable {
        &self.table
    }

    pub fn layout(&self) -> &SiteLayout {
        &self.layout
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_voxels(&self) -> usize {
        self.values.ncols()
    }

    /// Row `n` embedded in a full volume; unmasked voxels come from `background`.
    pub fn row_volume(&self, n: usize, background: &[f64]) -> Volume {
        let mut data = background.to_vec();
        let row: Vec<f64> = self.values.row(n).to_vec();
        self.mask.scatter_into(&row, &mut data);
        Volume {
            geometry: self.geometry().clone(),
            data,
            description: String::new(),
        }
    }
}

/// Builds the dataset from loaded volumes keyed by image id.
pub fn assemble_dataset(
    volumes: Vec<(String, Volume)>,
    mask: Mask,
    table: SampleTable,
) -> Result<VoxelDataset> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut by_id = std::collections::HashMap::with_capacity(volumes.len());
    for (id, vol) in volumes {
        if by_id.insert(id.clone(), vol).is_some() {
            return Err(Error::Dataset(format!("volume {id:?} supplied twice")));
        }
    }
    let n = table.len();
    let v = mask.len();
    let mut values = Array2::zeros((n, v));
    for (row, sample) in table.rows().iter().enumerate() {
        let vol = by_id.get(&sample.image_id).ok_or_else(|| {
            Error::Dataset(format!("no volume for image_id {:?}", sample.image_id))
        })?;
        if vol.geometry.dims != mask.geometry().dims {
            return Err(Error::Geometry(format!(
                "image {:?} has dims {:?} but the mask has {:?}",
                sample.image_id,
                vol.geometry.dims,
                mask.geometry().dims
            )));
        }
        for (k, &idx) in mask.voxel_index().iter().enumerate() {
            let x = vol.data[idx];
            if !x.is_finite() {
                return Err(Error::NonFinite {
                    image_id: sample.image_id.clone(),
                    voxel_index: idx,
                });
            }
            values[[row, k]] = x;
        }
    }
    if by_id.len() != n {
        let extra: Vec<&String> = by_id
            .keys()
            .filter(|id| !table.rows().iter().any(|r| &r.image_id == *id))
            .collect();
        return Err(Error::Dataset(format!("volumes without table rows: {extra:?}")));
    }
    VoxelDataset::new(values, mask, table)
}

/// Site-mean images ȳ_i (S×V) and the grand mean ȳ over all N images.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteMeans {
    pub site: Array2<f64>,
    pub grand: Array1<f64>,
}

pub fn site_means(dataset: &VoxelDataset) -> SiteMeans {
    let layout = dataset.layout();
    let values = dataset.values();
    let mut site = Array2::<f64>::zeros((layout.n_sites(), dataset.n_voxels()));
    for (row, &s) in layout.membership().iter().enumerate() {
        let mut acc = site.row_mut(s);
        acc += &values.row(row);
    }
    for (mut r, &n) in site.axis_iter_mut(Axis(0)).zip(layout.counts()) {
        r /= n as f64;
    }
    let grand = values
        .mean_axis(Axis(0))
        .expect("datasets have at least one row");
    SiteMeans { site, grand }
}
