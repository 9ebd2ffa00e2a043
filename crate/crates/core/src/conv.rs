//! Direct 3D convolution kernels on raw `f64` buffers.
//!
//! Layouts are `[N, C, D, H, W]` for activations and `[F, C, kd, kh, kw]`
//! for kernels, row-major. Stride-1 convolutions use a padded-stride
//! formulation: the zero-padded input plane of one channel is treated as a
//! flat buffer, so every kernel tap becomes one contiguous multiply-add
//! over the whole output block. When the stride equals the kernel and there
//! is no padding, patches do not overlap and the input is unfolded into
//! `C·taps` planes so the convolution becomes a dense channel mix. Other
//! strides use a plain loop nest.
//! Both paths accumulate in a fixed order and are bitwise reproducible.

/// Static shape information for one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    /// Output spatial extents, or `None` if the kernel does not fit.
    pub fn output(&self) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            let span = self.input[i] + 2 * self.padding[i];
            if self.stride[i] == 0 || span < self.kernel[i] {
                return None;
            }
            *o = (span - self.kernel[i]) / self.stride[i] + 1;
        }
        Some(out)
    }

    fn out(&self) -> [usize; 3] {
        self.output().expect("validated geometry")
    }

    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn out_len(&self) -> usize {
        self.out().iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn padded(&self) -> [usize; 3] {
        [
            self.input[0] + 2 * self.padding[0],
            self.input[1] + 2 * self.padding[1],
            self.input[2] + 2 * self.padding[2],
        ]
    }

    fn unit_stride(&self) -> bool {
        self.stride == [1, 1, 1]
    }

    /// Non-overlapping patches: stride equals kernel, no padding.
    fn patchwise(&self) -> bool {
        !self.unit_stride() && self.stride == self.kernel && self.padding == [0, 0, 0]
    }
}

/// Copy one `[D, H, W]` plane into the interior of a zeroed padded plane.
fn pad_plane(src: &[f64], ext: [usize; 3], pad: [usize; 3], dst: &mut [f64]) {
    let pe = [
        ext[0] + 2 * pad[0],
        ext[1] + 2 * pad[1],
        ext[2] + 2 * pad[2],
    ];
    dst.fill(0.0);
    for d in 0..ext[0] {
        for h in 0..ext[1] {
            let s = (d * ext[1] + h) * ext[2];
            let t = ((d + pad[0]) * pe[1] + h + pad[1]) * pe[2] + pad[2];
            dst[t..t + ext[2]].copy_from_slice(&src[s..s + ext[2]]);
        }
    }
}

/// Length of the padded-stride output block for a unit-stride geometry.
fn block_len(out: [usize; 3], padded: [usize; 3]) -> usize {
    (out[0] - 1) * padded[1] * padded[2] + (out[1] - 1) * padded[2] + out[2]
}

/// Flat offsets of every kernel tap inside a padded plane.
fn tap_offsets(kernel: [usize; 3], padded: [usize; 3]) -> Vec<usize> {
    let mut offs = Vec::with_capacity(kernel.iter().product());
    for a in 0..kernel[0] {
        for b in 0..kernel[1] {
            for t in 0..kernel[2] {
                offs.push((a * padded[1] + b) * padded[2] + t);
            }
        }
    }
    offs
}

const TILE: usize = 8;
const FILTER_BLOCK: usize = 4;
const TAP_GROUP: usize = 3;
const GRAD_FILTER_BLOCK: usize = 4;

/// For a group of `FB` filters, accumulate every input channel and kernel
/// tap into padded-stride output blocks:
/// `out[fb][j] += Σ_c Σ_t k[fb][c][t] · xp[c][off[t] + j]`.
///
/// Each output tile is held in registers while the channel and tap loops
/// run; the summation order per element is c-major then tap.
fn accumulate_filters<const FB: usize>(
    out: &mut [f64],
    blen: usize,
    xp: &[f64],
    plen: usize,
    k: &[f64],
    channels: usize,
    offsets: &[usize],
) {
    let taps = offsets.len();
    let mut j = 0;
    while j + TILE <= blen {
        let mut acc = [[0.0f64; TILE]; FB];
        for c in 0..channels {
            let plane = &xp[c * plen..(c + 1) * plen];
            for (t, &off) in offsets.iter().enumerate() {
                let xs: &[f64; TILE] = plane[off + j..off + j + TILE].try_into().unwrap();
                for (fb, row) in acc.iter_mut().enumerate() {
                    let w = k[(fb * channels + c) * taps + t];
                    for i in 0..TILE {
                        row[i] += w * xs[i];
                    }
                }
            }
        }
        for (fb, row) in acc.iter().enumerate() {
            out[fb * blen + j..fb * blen + j + TILE].copy_from_slice(row);
        }
        j += TILE;
    }
    for jj in j..blen {
        let mut acc = [0.0f64; FB];
        for c in 0..channels {
            let plane = &xp[c * plen..(c + 1) * plen];
            for (t, &off) in offsets.iter().enumerate() {
                let x = plane[off + jj];
                for (fb, a) in acc.iter_mut().enumerate() {
                    *a += k[(fb * channels + c) * taps + t] * x;
                }
            }
        }
        for (fb, a) in acc.iter().enumerate() {
            out[fb * blen + jj] = *a;
        }
    }
}

/// `out[fb][t] = Σ_j gb[fb][j] · plane[offs[t] + j]` for `FB` gradient
/// blocks and `G` kernel taps, lane-parallel with a fixed final reduction.
fn tap_dots<const FB: usize, const G: usize>(
    gb: &[f64],
    blen: usize,
    plane: &[f64],
    offs: &[usize],
) -> [[f64; G]; FB] {
    let mut acc = [[[0.0f64; TILE]; G]; FB];
    let mut j = 0;
    while j + TILE <= blen {
        for (fb, per_tap) in acc.iter_mut().enumerate() {
            let gs: &[f64; TILE] = gb[fb * blen + j..fb * blen + j + TILE].try_into().unwrap();
            for (t, lanes) in per_tap.iter_mut().enumerate() {
                let xs: &[f64; TILE] = plane[offs[t] + j..offs[t] + j + TILE].try_into().unwrap();
                for i in 0..TILE {
                    lanes[i] += gs[i] * xs[i];
                }
            }
        }
        j += TILE;
    }
    let mut out = [[0.0f64; G]; FB];
    for fb in 0..FB {
        for t in 0..G {
            let lanes = &acc[fb][t];
            let mut s = lanes.iter().sum::<f64>();
            for jj in j..blen {
                s += gb[fb * blen + jj] * plane[offs[t] + jj];
            }
            out[fb][t] = s;
        }
    }
    out
}

/// [`tap_dots`] for `fb ≤ GRAD_FILTER_BLOCK` filters and a group of either
/// `TAP_GROUP` taps or one tap, flattened filter-major.
fn tap_dots_block(
    fb: usize,
    group: usize,
    gb: &[f64],
    blen: usize,
    plane: &[f64],
    offs: &[usize],
) -> Vec<f64> {
    match (fb, group == TAP_GROUP) {
        (4, true) => tap_dots::<4, TAP_GROUP>(gb, blen, plane, offs).concat(),
        (3, true) => tap_dots::<3, TAP_GROUP>(gb, blen, plane, offs).concat(),
        (2, true) => tap_dots::<2, TAP_GROUP>(gb, blen, plane, offs).concat(),
        (1, true) => tap_dots::<1, TAP_GROUP>(gb, blen, plane, offs).concat(),
        (4, false) => tap_dots::<4, 1>(gb, blen, plane, offs).concat(),
        (3, false) => tap_dots::<3, 1>(gb, blen, plane, offs).concat(),
        (2, false) => tap_dots::<2, 1>(gb, blen, plane, offs).concat(),
        _ => tap_dots::<1, 1>(gb, blen, plane, offs).concat(),
    }
}

/// Gather the padded-stride block back into a dense `[D', H', W']` plane.
fn unpack_block(block: &[f64], out: [usize; 3], padded: [usize; 3], dst: &mut [f64]) {
    for d in 0..out[0] {
        for h in 0..out[1] {
            let s = (d * padded[1] + h) * padded[2];
            let t = (d * out[1] + h) * out[2];
            dst[t..t + out[2]].copy_from_slice(&block[s..s + out[2]]);
        }
    }
}

/// Scatter a dense plane into padded-stride layout (gaps are zero).
fn pack_block(src: &[f64], out: [usize; 3], padded: [usize; 3], block: &mut [f64]) {
    block.fill(0.0);
    for d in 0..out[0] {
        for h in 0..out[1] {
            let s = (d * out[1] + h) * out[2];
            let t = (d * padded[1] + h) * padded[2];
            block[t..t + out[2]].copy_from_slice(&src[s..s + out[2]]);
        }
    }
}

/// Forward convolution (cross-correlation, zero padding, no bias).
pub fn conv3d_forward(x: &[f64], k: &[f64], g: &ConvGeometry) -> Vec<f64> {
    if g.unit_stride() {
        forward_unit(x, k, g)
    } else if g.patchwise() {
        forward_patchwise(x, k, g)
    } else {
        forward_strided(x, k, g)
    }
}

fn forward_unit(x: &[f64], k: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let out = g.out();
    let padded = g.padded();
    let (in_len, out_len, taps) = (g.in_len(), g.out_len(), g.taps());
    let plen: usize = padded.iter().product();
    let blen = block_len(out, padded);
    let offsets = tap_offsets(g.kernel, padded);

    let mut y = vec![0.0; g.batch * g.out_channels * out_len];
    let mut xp = vec![0.0; g.in_channels * plen];
    let mut blocks = vec![0.0; FILTER_BLOCK * blen];
    let ck = g.in_channels * taps;
    for n in 0..g.batch {
        for c in 0..g.in_channels {
            let src = &x[(n * g.in_channels + c) * in_len..][..in_len];
            pad_plane(src, g.input, g.padding, &mut xp[c * plen..(c + 1) * plen]);
        }
        let mut f0 = 0;
        while f0 < g.out_channels {
            let fb = FILTER_BLOCK.min(g.out_channels - f0);
            let kf = &k[f0 * ck..(f0 + fb) * ck];
            let out_blocks = &mut blocks[..fb * blen];
            let ch = g.in_channels;
            match fb {
                4 => accumulate_filters::<4>(out_blocks, blen, &xp, plen, kf, ch, &offsets),
                3 => accumulate_filters::<3>(out_blocks, blen, &xp, plen, kf, ch, &offsets),
                2 => accumulate_filters::<2>(out_blocks, blen, &xp, plen, kf, ch, &offsets),
                _ => accumulate_filters::<1>(out_blocks, blen, &xp, plen, kf, ch, &offsets),
            }
            for i in 0..fb {
                let dst = &mut y[(n * g.out_channels + f0 + i) * out_len..][..out_len];
                unpack_block(&blocks[i * blen..(i + 1) * blen], out, padded, dst);
            }
            f0 += fb;
        }
    }
    y
}

fn forward_strided(x: &[f64], k: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let out = g.out();
    let (in_len, out_len, taps) = (g.in_len(), g.out_len(), g.taps());
    let [id, ih, iw] = g.input;
    let mut y = vec![0.0; g.batch * g.out_channels * out_len];
    for n in 0..g.batch {
        for f in 0..g.out_channels {
            let yo = (n * g.out_channels + f) * out_len;
            for c in 0..g.in_channels {
                let xo = (n * g.in_channels + c) * in_len;
                let ko = (f * g.in_channels + c) * taps;
                for od in 0..out[0] {
                    for oh in 0..out[1] {
                        for ow in 0..out[2] {
                            let mut acc = 0.0;
                            for a in 0..g.kernel[0] {
                                let d = (od * g.stride[0] + a) as isize - g.padding[0] as isize;
                                if d < 0 || d >= id as isize {
                                    continue;
                                }
                                for b in 0..g.kernel[1] {
                                    let h = (oh * g.stride[1] + b) as isize - g.padding[1] as isize;
                                    if h < 0 || h >= ih as isize {
                                        continue;
                                    }
                                    for t in 0..g.kernel[2] {
                                        let w =
                                            (ow * g.stride[2] + t) as isize - g.padding[2] as isize;
                                        if w < 0 || w >= iw as isize {
                                            continue;
                                        }
                                        let xi = (d as usize * ih + h as usize) * iw + w as usize;
                                        let ki = (a * g.kernel[1] + b) * g.kernel[2] + t;
                                        acc += k[ko + ki] * x[xo + xi];
                                    }
                                }
                            }
                            y[yo + (od * out[1] + oh) * out[2] + ow] += acc;
                        }
                    }
                }
            }
        }
    }
    y
}

/// Gradient of the convolution with respect to its input, i.e. the
/// transposed convolution of `gy` with `k`.
pub fn conv3d_backward_input(gy: &[f64], k: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let fits_flip = (0..3).all(|i| g.padding[i] < g.kernel[i]);
    if g.unit_stride() && fits_flip {
        backward_input_unit(gy, k, g)
    } else if g.patchwise() {
        backward_input_patchwise(gy, k, g)
    } else {
        backward_input_strided(gy, k, g)
    }
}

fn backward_input_unit(gy: &[f64], k: &[f64], g: &ConvGeometry) -> Vec<f64> {
    // Full correlation of gy with the spatially flipped, channel-swapped
    // kernel.
    let taps = g.taps();
    let mut flipped = vec![0.0; k.len()];
    for f in 0..g.out_channels {
        for c in 0..g.in_channels {
            let src = &k[(f * g.in_channels + c) * taps..][..taps];
            let dst = &mut flipped[(c * g.out_channels + f) * taps..][..taps];
            for (i, &w) in src.iter().enumerate() {
                dst[taps - 1 - i] = w;
            }
        }
    }
    let out = g.out();
    let flip_geom = ConvGeometry {
        batch: g.batch,
        in_channels: g.out_channels,
        out_channels: g.in_channels,
        input: out,
        kernel: g.kernel,
        stride: [1, 1, 1],
        padding: [
            g.kernel[0] - 1 - g.padding[0],
            g.kernel[1] - 1 - g.padding[1],
            g.kernel[2] - 1 - g.padding[2],
        ],
    };
    debug_assert_eq!(flip_geom.output(), Some(g.input));
    forward_unit(gy, &flipped, &flip_geom)
}

fn backward_input_strided(gy: &[f64], k: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let out = g.out();
    let (in_len, out_len, taps) = (g.in_len(), g.out_len(), g.taps());
    let [id, ih, iw] = g.input;
    let mut gx = vec![0.0; g.batch * g.in_channels * in_len];
    for n in 0..g.batch {
        for c in 0..g.in_channels {
            let xo = (n * g.in_channels + c) * in_len;
            for f in 0..g.out_channels {
                let yo = (n * g.out_channels + f) * out_len;
                let ko = (f * g.in_channels + c) * taps;
                for od in 0..out[0] {
                    for oh in 0..out[1] {
                        for ow in 0..out[2] {
                            let gv = gy[yo + (od * out[1] + oh) * out[2] + ow];
                            if gv == 0.0 {
                                continue;
                            }
                            for a in 0..g.kernel[0] {
                                let d = (od * g.stride[0] + a) as isize - g.padding[0] as isize;
                                if d < 0 || d >= id as isize {
                                    continue;
                                }
                                for b in 0..g.kernel[1] {
                                    let h = (oh * g.stride[1] + b) as isize - g.padding[1] as isize;
                                    if h < 0 || h >= ih as isize {
                                        continue;
                                    }
                                    for t in 0..g.kernel[2] {
                                        let w =
                                            (ow * g.stride[2] + t) as isize - g.padding[2] as isize;
                                        if w < 0 || w >= iw as isize {
                                            continue;
                                        }
                                        let xi = (d as usize * ih + h as usize) * iw + w as usize;
                                        let ki = (a * g.kernel[1] + b) * g.kernel[2] + t;
                                        gx[xo + xi] += k[ko + ki] * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Gradient of the convolution with respect to the kernel.
pub fn conv3d_backward_kernel(x: &[f64], gy: &[f64], g: &ConvGeometry) -> Vec<f64> {
    if g.unit_stride() {
        backward_kernel_unit(x, gy, g)
    } else if g.patchwise() {
        backward_kernel_patchwise(x, gy, g)
    } else {
        backward_kernel_strided(x, gy, g)
    }
}

fn backward_kernel_unit(x: &[f64], gy: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let out = g.out();
    let padded = g.padded();
    let (in_len, out_len, taps) = (g.in_len(), g.out_len(), g.taps());
    let plen: usize = padded.iter().product();
    let blen = block_len(out, padded);
    let offsets = tap_offsets(g.kernel, padded);

    let mut gk = vec![0.0; g.out_channels * g.in_channels * taps];
    let mut xp = vec![0.0; g.in_channels * plen];
    let mut gblocks = vec![0.0; g.out_channels * blen];
    let mut full = vec![0.0; blen];
    for n in 0..g.batch {
        for c in 0..g.in_channels {
            let src = &x[(n * g.in_channels + c) * in_len..][..in_len];
            pad_plane(src, g.input, g.padding, &mut xp[c * plen..(c + 1) * plen]);
        }
        for f in 0..g.out_channels {
            let src = &gy[(n * g.out_channels + f) * out_len..][..out_len];
            pack_block(src, out, padded, &mut full);
            gblocks[f * blen..(f + 1) * blen].copy_from_slice(&full);
        }
        let mut f0 = 0;
        while f0 < g.out_channels {
            let fb = GRAD_FILTER_BLOCK.min(g.out_channels - f0);
            let gb = &gblocks[f0 * blen..(f0 + fb) * blen];
            for c in 0..g.in_channels {
                let plane = &xp[c * plen..(c + 1) * plen];
                let mut t0 = 0;
                while t0 < taps {
                    let group = if taps - t0 >= TAP_GROUP { TAP_GROUP } else { 1 };
                    let offs = &offsets[t0..t0 + group];
                    let sums = tap_dots_block(fb, group, gb, blen, plane, offs);
                    for i in 0..fb {
                        for t in 0..group {
                            gk[((f0 + i) * g.in_channels + c) * taps + t0 + t] +=
                                sums[i * group + t];
                        }
                    }
                    t0 += group;
                }
            }
            f0 += fb;
        }
    }
    gk
}

fn backward_kernel_strided(x: &[f64], gy: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let out = g.out();
    let (in_len, out_len, taps) = (g.in_len(), g.out_len(), g.taps());
    let [id, ih, iw] = g.input;
    let mut gk = vec![0.0; g.out_channels * g.in_channels * taps];
    for n in 0..g.batch {
        for f in 0..g.out_channels {
            let yo = (n * g.out_channels + f) * out_len;
            for c in 0..g.in_channels {
                let xo = (n * g.in_channels + c) * in_len;
                let ko = (f * g.in_channels + c) * taps;
                for a in 0..g.kernel[0] {
                    for b in 0..g.kernel[1] {
                        for t in 0..g.kernel[2] {
                            let mut acc = 0.0;
                            for od in 0..out[0] {
                                let d = (od * g.stride[0] + a) as isize - g.padding[0] as isize;
                                if d < 0 || d >= id as isize {
                                    continue;
                                }
                                for oh in 0..out[1] {
                                    let h = (oh * g.stride[1] + b) as isize - g.padding[1] as isize;
                                    if h < 0 || h >= ih as isize {
                                        continue;
                                    }
                                    for ow in 0..out[2] {
                                        let w =
                                            (ow * g.stride[2] + t) as isize - g.padding[2] as isize;
                                        if w < 0 || w >= iw as isize {
                                            continue;
                                        }
                                        let xi = (d as usize * ih + h as usize) * iw + w as usize;
                                        acc +=
                                            gy[yo + (od * out[1] + oh) * out[2] + ow] * x[xo + xi];
                                    }
                                }
                            }
                            gk[ko + (a * g.kernel[1] + b) * g.kernel[2] + t] += acc;
                        }
                    }
                }
            }
        }
    }
    gk
}

/// Visit every (tap, output voxel, input voxel) triple of a patchwise
/// geometry, with taps in kernel order and voxels in output order.
fn for_each_patch_voxel(g: &ConvGeometry, mut visit: impl FnMut(usize, usize, usize)) {
    let out = g.out();
    let [kd, kh, kw] = g.kernel;
    let [_, ih, iw] = g.input;
    for a in 0..kd {
        for b in 0..kh {
            for t in 0..kw {
                let tap = (a * kh + b) * kw + t;
                let mut o = 0;
                for od in 0..out[0] {
                    for oh in 0..out[1] {
                        let row = ((od * kd + a) * ih + oh * kh + b) * iw + t;
                        for ow in 0..out[2] {
                            visit(tap, o, row + ow * kw);
                            o += 1;
                        }
                    }
                }
            }
        }
    }
}

/// Unfold one batch item into `[C, taps, out_len]`.
fn unfold(x: &[f64], g: &ConvGeometry, dst: &mut [f64]) {
    let (in_len, out_len, taps) = (g.in_len(), g.out_len(), g.taps());
    for c in 0..g.in_channels {
        let src = &x[c * in_len..(c + 1) * in_len];
        let planes = &mut dst[c * taps * out_len..(c + 1) * taps * out_len];
        for_each_patch_voxel(g, |tap, o, i| planes[tap * out_len + o] = src[i]);
    }
}

/// Inverse of [`unfold`]; voxels outside every patch stay zero.
fn fold(src: &[f64], g: &ConvGeometry, x: &mut [f64]) {
    let (in_len, out_len, taps) = (g.in_len(), g.out_len(), g.taps());
    for c in 0..g.in_channels {
        let dst = &mut x[c * in_len..(c + 1) * in_len];
        let planes = &src[c * taps * out_len..(c + 1) * taps * out_len];
        for_each_patch_voxel(g, |tap, o, i| dst[i] = planes[tap * out_len + o]);
    }
}

/// `out[r][j] = Σ_s m[r][s] · planes[s][j]` for every row `r` of `m`.
fn channel_mix(m: &[f64], rows: usize, planes: &[f64], plen: usize, out: &mut [f64]) {
    let cols = planes.len() / plen;
    let mut r0 = 0;
    while r0 < rows {
        let fb = FILTER_BLOCK.min(rows - r0);
        let mf = &m[r0 * cols..(r0 + fb) * cols];
        let ob = &mut out[r0 * plen..(r0 + fb) * plen];
        match fb {
            4 => accumulate_filters::<4>(ob, plen, planes, plen, mf, cols, &[0]),
            3 => accumulate_filters::<3>(ob, plen, planes, plen, mf, cols, &[0]),
            2 => accumulate_filters::<2>(ob, plen, planes, plen, mf, cols, &[0]),
            _ => accumulate_filters::<1>(ob, plen, planes, plen, mf, cols, &[0]),
        }
        r0 += fb;
    }
}

fn forward_patchwise(x: &[f64], k: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let depth = g.in_channels * g.taps();
    let mut y = vec![0.0; g.batch * g.out_channels * out_len];
    let mut cols = vec![0.0; depth * out_len];
    for n in 0..g.batch {
        unfold(
            &x[n * g.in_channels * in_len..][..g.in_channels * in_len],
            g,
            &mut cols,
        );
        let yn = &mut y[n * g.out_channels * out_len..][..g.out_channels * out_len];
        channel_mix(k, g.out_channels, &cols, out_len, yn);
    }
    y
}

fn backward_input_patchwise(gy: &[f64], k: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let depth = g.in_channels * g.taps();
    // Transposed kernel, `[C·taps, F]`.
    let mut kt = vec![0.0; k.len()];
    for f in 0..g.out_channels {
        for s in 0..depth {
            kt[s * g.out_channels + f] = k[f * depth + s];
        }
    }
    let mut gx = vec![0.0; g.batch * g.in_channels * in_len];
    let mut cols = vec![0.0; depth * out_len];
    for n in 0..g.batch {
        let gyn = &gy[n * g.out_channels * out_len..][..g.out_channels * out_len];
        channel_mix(&kt, depth, gyn, out_len, &mut cols);
        fold(
            &cols,
            g,
            &mut gx[n * g.in_channels * in_len..][..g.in_channels * in_len],
        );
    }
    gx
}

fn backward_kernel_patchwise(x: &[f64], gy: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let depth = g.in_channels * g.taps();
    let offsets: Vec<usize> = (0..depth).map(|s| s * out_len).collect();
    let mut gk = vec![0.0; g.out_channels * depth];
    let mut cols = vec![0.0; depth * out_len];
    for n in 0..g.batch {
        unfold(
            &x[n * g.in_channels * in_len..][..g.in_channels * in_len],
            g,
            &mut cols,
        );
        let gyn = &gy[n * g.out_channels * out_len..][..g.out_channels * out_len];
        let mut f0 = 0;
        while f0 < g.out_channels {
            let fb = GRAD_FILTER_BLOCK.min(g.out_channels - f0);
            let gb = &gyn[f0 * out_len..(f0 + fb) * out_len];
            let mut s0 = 0;
            while s0 < depth {
                let group = if depth - s0 >= TAP_GROUP {
                    TAP_GROUP
                } else {
                    1
                };
                let offs = &offsets[s0..s0 + group];
                let sums = tap_dots_block(fb, group, gb, out_len, &cols, offs);
                for i in 0..fb {
                    for t in 0..group {
                        gk[(f0 + i) * depth + s0 + t] += sums[i * group + t];
                    }
                }
                s0 += group;
            }
            f0 += fb;
        }
    }
    gk
}

/// Add `bias[f]` to every voxel of channel `f`.
pub fn add_channel_bias(y: &mut [f64], bias: &[f64], batch: usize, spatial: usize) {
    let channels = bias.len();
    for n in 0..batch {
        for (f, &b) in bias.iter().enumerate() {
            let o = (n * channels + f) * spatial;
            for v in &mut y[o..o + spatial] {
                *v += b;
            }
        }
    }
}

/// Per-channel sum of `gy`, the gradient of a channel bias.
pub fn channel_sums(gy: &[f64], channels: usize, batch: usize, spatial: usize) -> Vec<f64> {
    let mut out = vec![0.0; channels];
    for n in 0..batch {
        for (f, slot) in out.iter_mut().enumerate() {
            let o = (n * channels + f) * spatial;
            *slot += gy[o..o + spatial].iter().sum::<f64>();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    /// Reference convolution straight from the definition.
    fn naive_forward(x: &[f64], k: &[f64], g: &ConvGeometry) -> Vec<f64> {
        let out = g.output().unwrap();
        let mut y = vec![0.0; g.batch * g.out_channels * out.iter().product::<usize>()];
        let at = |n: usize, c: usize, d: isize, h: isize, w: isize| -> f64 {
            if d < 0 || h < 0 || w < 0 {
                return 0.0;
            }
            let (d, h, w) = (d as usize, h as usize, w as usize);
            if d >= g.input[0] || h >= g.input[1] || w >= g.input[2] {
                return 0.0;
            }
            x[(((n * g.in_channels + c) * g.input[0] + d) * g.input[1] + h) * g.input[2] + w]
        };
        for n in 0..g.batch {
            for f in 0..g.out_channels {
                for od in 0..out[0] {
                    for oh in 0..out[1] {
                        for ow in 0..out[2] {
                            let mut s = 0.0;
                            for c in 0..g.in_channels {
                                for a in 0..g.kernel[0] {
                                    for b in 0..g.kernel[1] {
                                        for t in 0..g.kernel[2] {
                                            let kv = k[(((f * g.in_channels + c) * g.kernel[0]
                                                + a)
                                                * g.kernel[1]
                                                + b)
                                                * g.kernel[2]
                                                + t];
                                            s += kv
                                                * at(
                                                    n,
                                                    c,
                                                    (od * g.stride[0] + a) as isize
                                                        - g.padding[0] as isize,
                                                    (oh * g.stride[1] + b) as isize
                                                        - g.padding[1] as isize,
                                                    (ow * g.stride[2] + t) as isize
                                                        - g.padding[2] as isize,
                                                );
                                        }
                                    }
                                }
                            }
                            y[(((n * g.out_channels + f) * out[0] + od) * out[1] + oh) * out[2]
                                + ow] = s;
                        }
                    }
                }
            }
        }
        y
    }

    fn random(rng: &mut RngStream, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()
    }

    fn geometries() -> Vec<ConvGeometry> {
        vec![
            ConvGeometry {
                batch: 2,
                in_channels: 3,
                out_channels: 2,
                input: [5, 4, 6],
                kernel: [3, 3, 3],
                stride: [1, 1, 1],
                padding: [1, 1, 1],
            },
            ConvGeometry {
                batch: 1,
                in_channels: 2,
                out_channels: 3,
                input: [4, 5, 3],
                kernel: [1, 2, 3],
                stride: [1, 1, 1],
                padding: [0, 1, 0],
            },
            ConvGeometry {
                batch: 1,
                in_channels: 2,
                out_channels: 2,
                input: [6, 4, 8],
                kernel: [2, 2, 2],
                stride: [2, 2, 2],
                padding: [0, 0, 0],
            },
            ConvGeometry {
                batch: 2,
                in_channels: 3,
                out_channels: 5,
                input: [5, 6, 7],
                kernel: [2, 1, 3],
                stride: [2, 1, 3],
                padding: [0, 0, 0],
            },
            ConvGeometry {
                batch: 2,
                in_channels: 1,
                out_channels: 2,
                input: [5, 7, 6],
                kernel: [3, 3, 2],
                stride: [2, 1, 3],
                padding: [1, 0, 1],
            },
        ]
    }

    fn close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn forward_matches_definition() {
        let mut rng = RngStream::new(1);
        for g in geometries() {
            let x = random(&mut rng, g.batch * g.in_channels * g.in_len());
            let k = random(&mut rng, g.out_channels * g.in_channels * g.taps());
            close(&conv3d_forward(&x, &k, &g), &naive_forward(&x, &k, &g));
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x, k), y> = <x, conv^T(y, k)> and the kernel gradient is the
        // derivative of that bilinear form with respect to k.
        let mut rng = RngStream::new(2);
        for g in geometries() {
            let x = random(&mut rng, g.batch * g.in_channels * g.in_len());
            let k = random(&mut rng, g.out_channels * g.in_channels * g.taps());
            let gy = random(&mut rng, g.batch * g.out_channels * g.out_len());
            let y = naive_forward(&x, &k, &g);
            let lhs: f64 = y.iter().zip(&gy).map(|(a, b)| a * b).sum();
            let gx = conv3d_backward_input(&gy, &k, &g);
            let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
            let gk = conv3d_backward_kernel(&x, &gy, &g);
            let rhs_k: f64 = k.iter().zip(&gk).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs_k).abs() < 1e-10, "{lhs} vs {rhs_k}");
        }
    }

    #[test]
    fn patchwise_and_strided_paths_agree() {
        let mut rng = RngStream::new(4);
        for g in geometries().into_iter().filter(|g| g.patchwise()) {
            let x = random(&mut rng, g.batch * g.in_channels * g.in_len());
            let k = random(&mut rng, g.out_channels * g.in_channels * g.taps());
            let gy = random(&mut rng, g.batch * g.out_channels * g.out_len());
            close(&forward_patchwise(&x, &k, &g), &forward_strided(&x, &k, &g));
            close(
                &backward_input_patchwise(&gy, &k, &g),
                &backward_input_strided(&gy, &k, &g),
            );
            close(
                &backward_kernel_patchwise(&x, &gy, &g),
                &backward_kernel_strided(&x, &gy, &g),
            );
        }
    }

    #[test]
    fn unit_and_strided_paths_agree() {
        let mut rng = RngStream::new(3);
        let g = geometries()[0];
        let x = random(&mut rng, g.batch * g.in_channels * g.in_len());
        let k = random(&mut rng, g.out_channels * g.in_channels * g.taps());
        let gy = random(&mut rng, g.batch * g.out_channels * g.out_len());
        close(&forward_unit(&x, &k, &g), &forward_strided(&x, &k, &g));
        close(
            &backward_input_unit(&gy, &k, &g),
            &backward_input_strided(&gy, &k, &g),
        );
        close(
            &backward_kernel_unit(&x, &gy, &g),
            &backward_kernel_strided(&x, &gy, &g),
        );
    }

    #[test]
    fn output_shape_formula() {
        let g = ConvGeometry {
            batch: 1,
            in_channels: 1,
            out_channels: 1,
            input: [7, 8, 9],
            kernel: [3, 2, 4],
            stride: [2, 3, 1],
            padding: [1, 0, 2],
        };
        assert_eq!(g.output(), Some([4, 3, 10]));
        let bad = ConvGeometry {
            kernel: [9, 1, 1],
            padding: [0, 0, 0],
            ..g
        };
        assert_eq!(bad.output(), None);
    }
}
