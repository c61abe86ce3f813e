//! Voxel grids, dense volumes, binary masks and the resampling primitives
//! shared by the rest of the pipeline.
//!
//! Storage order is x fastest, then y, then z, with channels slowest, which
//! is the NIfTI on-disk order for 4D images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid3 {
    pub dims: [usize; 3],
    /// Millimeters per voxel.
    pub spacing: [f64; 3],
    /// World position of voxel (0, 0, 0) in millimeters.
    #[serde(default)]
    pub origin: [f64; 3],
}

impl Grid3 {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::with_origin(dims, spacing, [0.0; 3])
    }

    pub fn with_origin(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let grid = Grid3 {
            dims,
            spacing,
            origin,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Unit-spacing grid; panics on a zero dimension.
    pub fn cube(n: usize) -> Self {
        Self::new([n, n, n], [1.0; 3]).expect("cube dimension must be positive")
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGrid(format!(
                "zero dimension in {:?}",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidGrid(format!(
                "non-positive spacing {:?}",
                self.spacing
            )));
        }
        Ok(())
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Linear index of voxel `(i, j, k)`.
    pub fn voxel_index(&self, i: usize, j: usize, k: usize) -> Result<usize> {
        let [nx, ny, nz] = self.dims;
        if i >= nx || j >= ny || k >= nz {
            return Err(Error::Index {
                i,
                j,
                k,
                dims: self.dims,
            });
        }
        Ok(i + nx * (j + ny * k))
    }

    /// Unchecked fast path for hot loops.
    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn voxel_coords(&self, index: usize) -> Result<[usize; 3]> {
        if index >= self.num_voxels() {
            return Err(Error::Index {
                i: index,
                j: 0,
                k: 0,
                dims: self.dims,
            });
        }
        let [nx, ny, _] = self.dims;
        Ok([index % nx, (index / nx) % ny, index / (nx * ny)])
    }

    pub fn same_shape(&self, other: &Grid3) -> bool {
        self.dims == other.dims
    }
}

/// Free-function form of [`Grid3::voxel_index`].
pub fn voxel_index(grid: &Grid3, i: usize, j: usize, k: usize) -> Result<usize> {
    grid.voxel_index(i, j, k)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    grid: Grid3,
    channels: usize,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(grid: Grid3, channels: usize, data: Vec<f32>) -> Result<Self> {
        grid.validate()?;
        if channels == 0 {
            return Err(Error::Shape("volume needs at least one channel".into()));
        }
        let expected = grid.num_voxels() * channels;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "data length {} does not match {:?} x {} channels",
                data.len(),
                grid.dims,
                channels
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite value at offset {pos}")));
        }
        Ok(Volume {
            grid,
            channels,
            data,
        })
    }

    pub fn zeros(grid: Grid3, channels: usize) -> Self {
        Volume {
            grid,
            channels,
            data: vec![0.0; grid.num_voxels() * channels],
        }
    }

    pub fn filled(grid: Grid3, channels: usize, value: f32) -> Self {
        Volume {
            grid,
            channels,
            data: vec![value; grid.num_voxels() * channels],
        }
    }

    /// Stacks single- or multi-channel volumes along the channel axis.
    pub fn stack(parts: &[Volume]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero volumes".into()))?;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        let mut channels = 0;
        for p in parts {
            if !p.grid.same_shape(&first.grid) {
                return Err(Error::GridMismatch(format!(
                    "{:?} vs {:?}",
                    p.grid.dims, first.grid.dims
                )));
            }
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        Ok(Volume {
            grid: first.grid,
            channels,
            data,
        })
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.grid.num_voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.grid.num_voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, i: usize, j: usize, k: usize, c: usize) -> f32 {
        self.data[c * self.grid.num_voxels() + self.grid.idx(i, j, k)]
    }

    pub fn extract_channel(&self, c: usize) -> Volume {
        Volume {
            grid: self.grid,
            channels: 1,
            data: self.channel(c).to_vec(),
        }
    }

    pub fn select_channels(&self, channels: &[usize]) -> Result<Volume> {
        if let Some(&bad) = channels.iter().find(|&&c| c >= self.channels) {
            return Err(Error::Shape(format!(
                "channel {bad} out of range ({} channels)",
                self.channels
            )));
        }
        let mut data = Vec::with_capacity(channels.len() * self.grid.num_voxels());
        for &c in channels {
            data.extend_from_slice(self.channel(c));
        }
        Volume::new(self.grid, channels.len(), data)
    }

    /// Copies the axis-aligned block starting at `start` with extent `size`.
    pub fn crop(&self, start: [usize; 3], size: [usize; 3]) -> Result<Volume> {
        let all: Vec<usize> = (0..self.channels).collect();
        self.crop_channels(&all, start, size)
    }

    /// [`crop`](Self::crop) restricted to `channels`, in the order given.
    pub fn crop_channels(
        &self,
        channels: &[usize],
        start: [usize; 3],
        size: [usize; 3],
    ) -> Result<Volume> {
        if let Some(&c) = channels.iter().find(|&&c| c >= self.channels) {
            return Err(Error::Shape(format!("channel {c} of {}", self.channels)));
        }
        for a in 0..3 {
            if size[a] == 0 || start[a] + size[a] > self.grid.dims[a] {
                return Err(Error::Shape(format!(
                    "crop {start:?}+{size:?} exceeds {:?}",
                    self.grid.dims
                )));
            }
        }
        let mut origin = self.grid.origin;
        for a in 0..3 {
            origin[a] += start[a] as f64 * self.grid.spacing[a];
        }
        let grid = Grid3::with_origin(size, self.grid.spacing, origin)?;
        let mut data = Vec::with_capacity(grid.num_voxels() * channels.len());
        for &c in channels {
            let src = self.channel(c);
            for k in 0..size[2] {
                for j in 0..size[1] {
                    let row = self.grid.idx(start[0], start[1] + j, start[2] + k);
                    data.extend_from_slice(&src[row..row + size[0]]);
                }
            }
        }
        Ok(Volume {
            grid,
            channels: channels.len(),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Volume {
        Volume {
            grid: self.grid,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    grid: Grid3,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(grid: Grid3, data: Vec<bool>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.num_voxels() {
            return Err(Error::Shape(format!(
                "mask length {} does not match {:?}",
                data.len(),
                grid.dims
            )));
        }
        Ok(BinaryMask { grid, data })
    }

    pub fn empty(grid: Grid3) -> Self {
        BinaryMask {
            grid,
            data: vec![false; grid.num_voxels()],
        }
    }

    pub fn from_fn(grid: Grid3, f: impl Fn(usize, usize, usize) -> bool) -> Self {
        let [nx, ny, nz] = grid.dims;
        let mut data = Vec::with_capacity(grid.num_voxels());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f(i, j, k));
                }
            }
        }
        BinaryMask { grid, data }
    }

    /// Nonzero voxels of a single-channel volume.
    pub fn from_volume(v: &Volume) -> Result<Self> {
        if v.channels() != 1 {
            return Err(Error::Shape("mask source must have one channel".into()));
        }
        Ok(BinaryMask {
            grid: *v.grid(),
            data: v.data().iter().map(|&x| x != 0.0).collect(),
        })
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            grid: self.grid,
            channels: 1,
            data: self
                .data
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.data[self.grid.idx(i, j, k)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }
}

/// One mask per channel: a voxel is set iff its probability is `>= thr`.
pub fn argmax_threshold_binarize(probs: &Volume, thr: f32) -> Result<Vec<BinaryMask>> {
    if !(thr > 0.0 && thr < 1.0) {
        return Err(Error::Domain(format!("threshold {thr} not in (0, 1)")));
    }
    if let Some(v) = probs.data().iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Domain(format!("probability {v} outside [0, 1]")));
    }
    Ok((0..probs.channels())
        .map(|c| BinaryMask {
            grid: *probs.grid(),
            data: probs.channel(c).iter().map(|&p| p >= thr).collect(),
        })
        .collect())
}

#[inline]
fn catmull_rom_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

/// Tap outside `[0, n)` is linearly extrapolated from the two edge samples.
#[inline]
fn tap(line: &[f64], i: isize) -> f64 {
    let n = line.len() as isize;
    if (0..n).contains(&i) {
        return line[i as usize];
    }
    if n == 1 {
        return line[0];
    }
    if i < 0 {
        line[0] + i as f64 * (line[1] - line[0])
    } else {
        let last = line[(n - 1) as usize];
        last + (i - n + 1) as f64 * (last - line[(n - 2) as usize])
    }
}

/// Samples each line along `axis` at the block centers `o*factor + (factor-1)/2`.
fn downsample_axis(data: &[f64], dims: [usize; 3], axis: usize, factor: usize) -> Vec<f64> {
    let n = dims[axis];
    let out_n = n / factor;
    let center = (factor as f64 - 1.0) / 2.0;
    let base = center.floor() as isize;
    let w = catmull_rom_weights(center - center.floor());

    let mut out_dims = dims;
    out_dims[axis] = out_n;
    let stride = |d: [usize; 3]| [1, d[0], d[0] * d[1]];
    let in_stride = stride(dims);
    let out_stride = stride(out_dims);
    let (a1, a2) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };

    let mut out = vec![0.0; out_dims.iter().product()];
    let mut line = vec![0.0; n];
    for u in 0..dims[a2] {
        for v in 0..dims[a1] {
            let in_base = u * in_stride[a2] + v * in_stride[a1];
            for (t, slot) in line.iter_mut().enumerate() {
                *slot = data[in_base + t * in_stride[axis]];
            }
            let out_base = u * out_stride[a2] + v * out_stride[a1];
            for o in 0..out_n {
                let i0 = (o * factor) as isize + base;
                let s = w[0] * tap(&line, i0 - 1)
                    + w[1] * tap(&line, i0)
                    + w[2] * tap(&line, i0 + 1)
                    + w[3] * tap(&line, i0 + 2);
                out[out_base + o * out_stride[axis]] = s;
            }
        }
    }
    out
}

/// Downsamples a single-channel volume by an integer factor per axis using
/// separable Catmull-Rom interpolation sampled at block centers.
///
/// Dimensions not divisible by `factor` are zero-padded up to the next
/// multiple first. Output values may be negative.
pub fn resample_cubic(v: &Volume, factor: usize) -> Result<Volume> {
    if factor == 0 {
        return Err(Error::Domain("resample factor must be positive".into()));
    }
    if v.channels() != 1 {
        return Err(Error::Shape("resample_cubic expects one channel".into()));
    }
    let g = v.grid();
    let padded: [usize; 3] = std::array::from_fn(|a| g.dims[a].div_ceil(factor) * factor);

    let mut buf = vec![0.0f64; padded.iter().product()];
    for k in 0..g.dims[2] {
        for j in 0..g.dims[1] {
            for i in 0..g.dims[0] {
                buf[i + padded[0] * (j + padded[1] * k)] = v.data()[g.idx(i, j, k)] as f64;
            }
        }
    }

    let mut dims = padded;
    for axis in 0..3 {
        buf = downsample_axis(&buf, dims, axis, factor);
        dims[axis] /= factor;
    }

    let shift = (factor as f64 - 1.0) / 2.0;
    let grid = Grid3::with_origin(
        dims,
        std::array::from_fn(|a| g.spacing[a] * factor as f64),
        std::array::from_fn(|a| g.origin[a] + shift * g.spacing[a]),
    )?;
    Volume::new(grid, 1, buf.into_iter().map(|x| x as f32).collect())
}
