//! Branch-free `exp` that the compiler can vectorise over slices.

const LOG2E: f32 = std::f32::consts::LOG2_E;
const LN2_HI: f32 = 0.693_359_4;
const LN2_LO: f32 = -2.121_944_4e-4;
/// 1.5 · 2²³: adding and subtracting it rounds to the nearest integer.
const ROUND: f32 = 12_582_912.0;

/// `eˣ` to within 1e-7 relative error for `x ∈ [-86, 88]`; inputs outside
/// are clamped, so very negative arguments give ~4.4e-38 rather than 0.
#[inline(always)]
pub(crate) fn exp(x: f32) -> f32 {
    let x = x.clamp(-86.0, 88.0);
    let n = (x * LOG2E + ROUND) - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let mut p = 1.987_569_2e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5.0e-1;
    let y = p * r * r + r + 1.0;
    f32::from_bits(y.to_bits().wrapping_add(((n as i32) << 23) as u32))
}

/// `xs[i] = exp(xs[i] - shift)`.
#[inline]
pub(crate) fn exp_shifted(xs: &mut [f32], shift: f32) {
    for x in xs {
        *x = exp(*x - shift);
    }
}
