//! Volume geometry, analysis masks, and mask erosion.

use crate::error::{Error, Result};

/// Image space shared by every volume in a study.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGeometry {
    /// Voxels per axis.
    pub dims: [usize; 3],
    /// Voxel spacing in mm. Informational only.
    pub voxel_size: [f64; 3],
    /// Row-major 4×4 map from voxel index to world coordinates.
    pub affine: [[f64; 4]; 4],
}

impl VolumeGeometry {
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3], affine: [[f64; 4]; 4]) -> Result<Self> {
        let geometry = Self {
            dims,
            voxel_size,
            affine,
        };
        geometry.validate()?;
        Ok(geometry)
    }

    /// Axis-aligned geometry whose affine is `diag(voxel_size, 1)`.
    pub fn with_spacing(dims: [usize; 3], voxel_size: [f64; 3]) -> Result<Self> {
        let mut affine = [[0.0; 4]; 4];
        for (axis, &size) in voxel_size.iter().enumerate() {
            affine[axis][axis] = size;
        }
        affine[3][3] = 1.0;
        Self::new(dims, voxel_size, affine)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Geometry(format!(
                "dims must be positive, got {:?}",
                self.dims
            )));
        }
        if self.voxel_size.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Geometry(format!(
                "voxel sizes must be positive, got {:?}",
                self.voxel_size
            )));
        }
        if self.affine.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Geometry("affine has non-finite entries".into()));
        }
        let a = &self.affine;
        let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
            - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
        if det == 0.0 {
            return Err(Error::Geometry("affine rotation/zoom block is singular".into()));
        }
        Ok(())
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Linear index with x varying fastest.
    pub fn linear_index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let rest = index / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }
}

/// Binary selection of the voxels included in harmonization and analysis.
///
/// `voxel_index` fixes the column order of every [`crate::VoxelDataset`]:
/// ascending linear index, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    geometry: VolumeGeometry,
    flags: Vec<bool>,
    voxel_index: Vec<usize>,
}

impl Mask {
    pub fn from_flags(geometry: VolumeGeometry, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != geometry.n_voxels() {
            return Err(Error::Geometry(format!(
                "mask has {} flags but geometry {:?} has {} voxels",
                flags.len(),
                geometry.dims,
                geometry.n_voxels()
            )));
        }
        let voxel_index: Vec<usize> = flags
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
            .collect();
        if voxel_index.is_empty() {
            return Err(Error::EmptyMask);
        }
        Ok(Self {
            geometry,
            flags,
            voxel_index,
        })
    }

    /// Every voxel of the geometry.
    pub fn full(geometry: VolumeGeometry) -> Result<Self> {
        let n = geometry.n_voxels();
        Self::from_flags(geometry, vec![true; n])
    }

    /// Nonzero voxels of `volume` are selected.
    pub fn from_volume(volume: &crate::Volume) -> Result<Self> {
        let flags = volume.data.iter().map(|&v| v != 0.0).collect();
        Self::from_flags(volume.geometry.clone(), flags)
    }

    pub fn geometry(&self) -> &VolumeGeometry {
        &self.geometry
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn voxel_index(&self) -> &[usize] {
        &self.voxel_index
    }

    /// Number of selected voxels (V).
    pub fn len(&self) -> usize {
        self.voxel_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxel_index.is_empty()
    }

    /// Values at the masked voxels, in column order.
    pub fn gather(&self, data: &[f64]) -> Vec<f64> {
        debug_assert_eq!(data.len(), self.flags.len());
        self.voxel_index.iter().map(|&i| data[i]).collect()
    }

    /// Writes `values` (one per masked voxel) into `target`, leaving unmasked voxels alone.
    pub fn scatter_into(&self, values: &[f64], target: &mut [f64]) {
        assert_eq!(values.len(), self.voxel_index.len());
        assert_eq!(target.len(), self.flags.len());
        for (&i, &v) in self.voxel_index.iter().zip(values) {
            target[i] = v;
        }
    }

    /// Full-volume array with `background` outside the mask.
    pub fn scatter(&self, values: &[f64], background: f64) -> Vec<f64> {
        let mut out = vec![background; self.flags.len()];
        self.scatter_into(values, &mut out);
        out
    }

    /// The mask as a 0/1 volume.
    pub fn to_volume(&self) -> crate::Volume {
        crate::Volume {
            geometry: self.geometry.clone(),
            data: self.flags.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect(),
            description: "mask".into(),
        }
    }
}

/// Binary erosion with the 6-connected structuring element, applied `radius` times.
///
/// Voxels outside the volume count as unselected, so the border erodes too.
pub fn erode_mask(mask: &Mask, radius_voxels: usize) -> Result<Mask> {
    if radius_voxels == 0 {
        return Err(Error::InvalidArgument("erosion radius must be >= 1".into()));
    }
    let geometry = mask.geometry();
    let [nx, ny, nz] = geometry.dims;
    let mut flags = mask.flags().to_vec();
    for _ in 0..radius_voxels {
        let prev = flags.clone();
        let at = |x: usize, y: usize, z: usize| prev[x + nx * (y + ny * z)];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = x + nx * (y + ny * z);
                    if !prev[i] {
                        continue;
                    }
                    let keep = x > 0
                        && x + 1 < nx
                        && y > 0
                        && y + 1 < ny
                        && z > 0
                        && z + 1 < nz
                        && at(x - 1, y, z)
                        && at(x + 1, y, z)
                        && at(x, y - 1, z)
                        && at(x, y + 1, z)
                        && at(x, y, z - 1)
                        && at(x, y, z + 1);
                    flags[i] = keep;
                }
            }
        }
    }
    Mask::from_flags(geometry.clone(), flags)
}
