pub mod blur;
pub mod conv;
pub mod grid;
pub mod patches;
pub mod resize;

pub use blur::{gaussian_blur3x3, gaussian_blur3x3_backward};
pub use conv::{conv2d, conv2d_backward, conv2d_strided, Conv2dGrads};
pub use grid::{
    grid_sample_bilinear, grid_sample_bilinear_backward, resize_bilinear, resize_bilinear_backward,
    GridSampleGrads,
};
pub use patches::{fold_patches, fold_patches_backward, unfold_patches, unfold_patches_backward};
pub use resize::{bicubic_resize, bicubic_resize_backward, ResizeFactor};

/// Mirror an out-of-range coordinate back into [0, n) without repeating the
/// border sample (reflection across the edge pixel: -1 -> 1, n -> n-2).
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i % period;
    if j < 0 {
        j += period;
    }
    if j >= n as isize {
        (period - j) as usize
    } else {
        j as usize
    }
}
