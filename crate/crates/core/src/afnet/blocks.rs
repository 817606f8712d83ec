use super::params::{bn_relu, conv, Bound, NormState};
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Tape, Var, NORM_EPS};

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            tape.value(a).shape(),
            tape.value(b).shape()
        )));
    }
    Ok(())
}

/// Motion aware attention over event features `fe` of shape `(N, C, H, W)`.
///
/// A 1x1 conv (`ma.logit`) scores every position, a softmax over the `H*W`
/// positions turns the scores into weights, and the weighted spatial sum
/// gives the descriptor `F_e^s` of shape `(N, C, 1, 1)`. Two 1x1 convs
/// (`ma.squeeze`, `ma.excite`) and a sigmoid turn it into a channel gate,
/// and `F_e^c = gate * fe`.
pub fn motion_aware(tape: &mut Tape, p: &Bound, fe: Var) -> Result<(Var, Var)> {
    let (n, _, h, w) = tape.value(fe).dims4()?;
    let one = ConvSpec::new(1, 0);
    let logits = conv(tape, p, "ma.logit", fe, one)?;
    let flat = tape.reshape(logits, [n, 1, h * w])?;
    let att = tape.softmax(flat, 2)?;
    let att = tape.reshape(att, [n, 1, h, w])?;
    let weighted = tape.mul(fe, att)?;
    let mean = tape.adaptive_avg_pool(weighted, 1, 1)?;
    let fes = tape.scale(mean, (h * w) as f64);
    let squeezed = conv(tape, p, "ma.squeeze", fes, one)?;
    let excited = conv(tape, p, "ma.excite", squeezed, one)?;
    let gate = tape.sigmoid(excited);
    let fec = tape.mul(fe, gate)?;
    Ok((fes, fec))
}

/// `F_f^m = sigmoid(F_e^c) * F_f + F_f`.
pub fn motion_modulate(tape: &mut Tape, ff: Var, fec: Var) -> Result<Var> {
    same_shape(tape, ff, fec, "style transform")?;
    let gate = tape.sigmoid(fec);
    let gated = tape.mul(gate, ff)?;
    tape.add(gated, ff)
}

/// `F_f^m = sigmoid(F_e^c) * F_f + F_f`, then AdaIN: normalize `F_f^m` per
/// channel and give it the mean and standard deviation of `F_e^c`.
pub fn style_transform(tape: &mut Tape, ff: Var, fec: Var, eps: f64) -> Result<Var> {
    let ffm = motion_modulate(tape, ff, fec)?;
    let mu_m = tape.channel_mean(ffm)?;
    let sd_m = tape.channel_std(ffm, eps)?;
    let mu_e = tape.channel_mean(fec)?;
    let sd_e = tape.channel_std(fec, eps)?;
    let centered = tape.sub(ffm, mu_m)?;
    let normalized = tape.div(centered, sd_m)?;
    let styled = tape.mul(normalized, sd_e)?;
    tape.add(styled, mu_e)
}

/// Offsets `O = conv3(conv1([F_e^c, F_f^st]))` (`da.reduce`, `da.offset`)
/// steer a 3x3 deformable conv (`da.deform`) over the frame features.
pub fn deformable_align(tape: &mut Tape, p: &Bound, ff: Var, fst: Var, fec: Var) -> Result<Var> {
    same_shape(tape, ff, fst, "deformable align")?;
    same_shape(tape, ff, fec, "deformable align")?;
    let cat = tape.concat_channels(&[fec, fst])?;
    let reduced = conv(tape, p, "da.reduce", cat, ConvSpec::new(1, 0))?;
    let offsets = conv(tape, p, "da.offset", reduced, ConvSpec::same(3))?;
    let w = p.get("da.deform.w")?;
    tape.deform_conv2d(ff, offsets, w, p.opt("da.deform.b"), ConvSpec::same(3))
}

/// One direction of cross-correlation: `relu(bn(conv3(x)))` filtered by the
/// per-sample depthwise kernel predicted from the other modality, plus a
/// residual.
fn enhance(
    tape: &mut Tape,
    p: &Bound,
    norms: &mut NormState,
    (side, other): (&str, &str),
    x: Var,
    kernel_source: Var,
    k: usize,
) -> Result<Var> {
    let theta = conv(tape, p, &format!("cf.{side}.theta"), x, ConvSpec::same(3))?;
    let f = bn_relu(tape, p, norms, &format!("cf.{side}.bn"), theta)?;
    let pooled = tape.adaptive_avg_pool(kernel_source, k, k)?;
    let kernel = conv(tape, p, &format!("cf.{other}.kernel"), pooled, ConvSpec::same(3))?;
    let filtered = tape.depthwise_conv2d(f, kernel)?;
    tape.add(filtered, f)
}

/// Cross-correlation fusion of aligned frame features and enhanced event
/// features:
///
/// ```text
/// F   = relu(bn(conv3(F_f^da)))      E   = relu(bn(conv3(F_e^c)))
/// K_e = conv3(pool_k(F_e^c))         K_f = conv3(pool_k(F_f^da))
/// F_f^e = F (*) K_e + F              F_e^f = E (*) K_f + E
/// F_fu = conv1([conv1(F_f^e), conv1(F_e^f)])
/// ```
///
/// where `(*)` is a per-sample depthwise convolution.
pub fn cross_correlation_fuse(
    tape: &mut Tape,
    p: &Bound,
    norms: &mut NormState,
    fda: Var,
    fec: Var,
    k: usize,
) -> Result<Var> {
    let (ffe, fef) = cross_correlation_terms(tape, p, norms, fda, fec, k)?;
    let one = ConvSpec::new(1, 0);
    let a = conv(tape, p, "cf.frame.out", ffe, one)?;
    let b = conv(tape, p, "cf.event.out", fef, one)?;
    let cat = tape.concat_channels(&[a, b])?;
    conv(tape, p, "cf.fuse", cat, one)
}

/// `(F_f^e, F_e^f)` before the output convolutions.
pub fn cross_correlation_terms(
    tape: &mut Tape,
    p: &Bound,
    norms: &mut NormState,
    fda: Var,
    fec: Var,
    k: usize,
) -> Result<(Var, Var)> {
    same_shape(tape, fda, fec, "cross-correlation fusion")?;
    let ffe = enhance(tape, p, norms, ("frame", "event"), fda, fec, k)?;
    let fef = enhance(tape, p, norms, ("event", "frame"), fec, fda, k)?;
    Ok((ffe, fef))
}

/// The alignment chain: motion aware attention, style transform and
/// deformable alignment. Returns `(F_f^da, F_e^c)`.
pub fn event_guided_alignment(tape: &mut Tape, p: &Bound, ff: Var, fe: Var) -> Result<(Var, Var)> {
    let (_, fec) = motion_aware(tape, p, fe)?;
    let fst = style_transform(tape, ff, fec, NORM_EPS)?;
    let fda = deformable_align(tape, p, ff, fst, fec)?;
    Ok((fda, fec))
}
