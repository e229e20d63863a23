//! 2-D DFT on power-of-two planes.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

fn check_size(height: usize, width: usize) -> Result<()> {
    if height.is_power_of_two() && width.is_power_of_two() {
        Ok(())
    } else {
        Err(Error::FftSize { height, width })
    }
}

fn transform_2d(re: &mut [f64], im: &mut [f64], height: usize, width: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(width), planner.plan_fft_inverse(height))
    } else {
        (planner.plan_fft_forward(width), planner.plan_fft_forward(height))
    };
    let mut buf: Vec<Complex64> = re.iter().zip(im.iter()).map(|(&a, &b)| Complex64::new(a, b)).collect();
    for row in buf.chunks_exact_mut(width) {
        row_fft.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); height];
    for c in 0..width {
        for r in 0..height {
            col[r] = buf[r * width + c];
        }
        col_fft.process(&mut col);
        for r in 0..height {
            buf[r * width + c] = col[r];
        }
    }
    for (k, z) in buf.into_iter().enumerate() {
        re[k] = z.re;
        im[k] = z.im;
    }
}

/// Unnormalized forward 2-D DFT of a real row-major plane.
pub fn fft2(plane: &[f64], height: usize, width: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    check_size(height, width)?;
    if plane.len() != height * width {
        return Err(Error::Shape(format!("plane of {} for {height}x{width}", plane.len())));
    }
    let mut re = plane.to_vec();
    let mut im = vec![0.0; plane.len()];
    transform_2d(&mut re, &mut im, height, width, false);
    Ok((re, im))
}

/// Complex forward 2-D DFT, unnormalized.
pub fn fft2_complex(re: &[f64], im: &[f64], height: usize, width: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    check_size(height, width)?;
    if re.len() != height * width || im.len() != re.len() {
        return Err(Error::Shape("complex plane size".into()));
    }
    let (mut r, mut i) = (re.to_vec(), im.to_vec());
    transform_2d(&mut r, &mut i, height, width, false);
    Ok((r, i))
}

/// Inverse 2-D DFT, divided by H·W so that `ifft2(fft2(x)) = x`.
pub fn ifft2(re: &[f64], im: &[f64], height: usize, width: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    check_size(height, width)?;
    if re.len() != height * width || im.len() != re.len() {
        return Err(Error::Shape("complex plane size".into()));
    }
    let (mut r, mut i) = (re.to_vec(), im.to_vec());
    transform_2d(&mut r, &mut i, height, width, true);
    let scale = 1.0 / (height * width) as f64;
    r.iter_mut().chain(i.iter_mut()).for_each(|v| *v *= scale);
    Ok((r, i))
}
