//! Model-size and cost studies: parameter-count laws, depth sweeps, and the
//! CSV emitters behind the `analyze-params` and `sweep-depth` subcommands.
//!
//! Counting here is analytic (closed-form walks over the planned layer
//! sequence) so sweeps over large depths stay instant; unit tests pin the
//! analytic numbers to the allocating model and to instrumented forward
//! passes.

use crate::error::Result;
use crate::puppet::{plan_layers, Mode, PuppetTemplate};

/// Stored (trainable) parameter count of the kernel-generating network for a
/// given maximum output channel count: the square-plus-twelve law.
pub fn stored_param_law(c_max: usize) -> usize {
    c_max * c_max + 12 * c_max
}

/// Stored bytes at 32-bit precision.
pub fn stored_bytes_f32(params: usize) -> usize {
    params * 4
}

/// Mebibytes at 32-bit precision (2^20 bytes per MiB).
pub fn stored_mib_f32(params: usize) -> f64 {
    stored_bytes_f32(params) as f64 / (1u64 << 20) as f64
}

/// Total parameter count materialized inside the executed network at depth
/// `d`: every planned convolution contributes `c_out * (c_in * k^2 + 1)`
/// (kernel plus bias). For generated modes none of these are stored.
pub fn generated_param_count(template: &PuppetTemplate, d: usize) -> Result<usize> {
    let plan = plan_layers(template, d)?;
    Ok(plan
        .specs
        .iter()
        .map(|s| s.c_out * (s.c_in * s.k * s.k + 1))
        .sum())
}

/// Stored parameter count of the conventional baseline that keeps every
/// planned kernel as an independent trainable array. Identical to the
/// generated count: the same arrays, but persisted.
pub fn fixed_stored_count(template: &PuppetTemplate, d: usize) -> Result<usize> {
    generated_param_count(template, d)
}

/// Stored parameter count of the weight-shared baseline: one transition
/// kernel per stage, one shared in-stage kernel per stage, and the head.
/// Depth-independent by construction.
pub fn shared_stored_count(template: &PuppetTemplate) -> usize {
    let k = template.kernel;
    let mut prev = template.in_channels;
    let mut total = 0;
    for &cs in &template.channels {
        total += cs * (prev * k * k + 1); // transition
        total += cs * (cs * k * k + 1); // shared in-stage kernel
        prev = cs;
    }
    let classes = template.num_classes;
    total += classes * (prev + 1); // 1x1 head
    total
}

/// Stored count for a template/mode/depth combination, matching what the
/// model allocates and the optimizer updates.
pub fn stored_count(template: &PuppetTemplate, d: usize) -> Result<usize> {
    match template.mode {
        Mode::Plain | Mode::Residual => Ok(stored_param_law(template.c_out_max())),
        Mode::Fixed => fixed_stored_count(template, d),
        Mode::Shared => Ok(shared_stored_count(template)),
    }
}

/// Closed-form multiply-add count of one forward pass at depth `d` on a
/// square input, mirroring the instrumented counter: stride-1 same-padded
/// convolutions, a 2x2 pool after each stage while both dims are at least 2,
/// and the pooled 1x1 head contributing `classes * c_last`.
pub fn analytic_multadds(template: &PuppetTemplate, d: usize, image_size: usize) -> Result<u64> {
    let plan = plan_layers(template, d)?;
    let mut h = image_size as u64;
    let mut w = image_size as u64;
    let mut total = 0u64;
    for (idx, spec) in plan.specs.iter().enumerate() {
        if idx + 1 == plan.specs.len() {
            // head after global average pooling
            total += (spec.c_out * spec.c_in) as u64;
            break;
        }
        total += spec.c_out as u64 * h * w * (spec.c_in * spec.k * spec.k) as u64;
        if plan.pool_after.contains(&idx) && h >= 2 && w >= 2 {
            h = (h - 2) / 2 + 1;
            w = (w - 2) / 2 + 1;
        }
    }
    Ok(total)
}

/// One row of the `analyze-params` report.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamRow {
    pub c_max: usize,
    pub stored_params: usize,
    pub stored_bytes_f32: usize,
    /// (depth, materialized parameter count) pairs for the scaled template.
    pub generated_at_depth: Vec<(usize, usize)>,
}

/// Parameter-size study over a list of maximum channel widths.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamReport {
    pub rows: Vec<ParamRow>,
}

/// Depths reported in the generated-parameter columns.
pub const REPORT_DEPTHS: [usize; 4] = [1, 2, 4, 8];

/// Build the parameter-size study. Stored counts come straight from the
/// law; generated counts use the width-scaled four-stage template with
/// 3-channel inputs and 10 classes (the configuration the size tables in
/// the source material describe).
pub fn analyze_params(c_max_list: &[usize]) -> Result<ParamReport> {
    let mut rows = Vec::with_capacity(c_max_list.len());
    for &c_max in c_max_list {
        let stored = stored_param_law(c_max);
        let mut generated_at_depth = Vec::new();
        if let Ok(template) = PuppetTemplate::scaled(c_max, 10, 3, Mode::Plain) {
            for d in REPORT_DEPTHS {
                generated_at_depth.push((d, generated_param_count(&template, d)?));
            }
        }
        rows.push(ParamRow {
            c_max,
            stored_params: stored,
            stored_bytes_f32: stored_bytes_f32(stored),
            generated_at_depth,
        });
    }
    Ok(ParamReport { rows })
}

/// CSV for the parameter study. Size basis is stated in the leading comment
/// line; the header row is schema-stable.
pub fn render_params_csv(report: &ParamReport) -> String {
    let mut out = String::new();
    out.push_str("# stored size basis: 32-bit floats, MiB = params * 4 / 2^20\n");
    out.push_str("c_max,stored_params,stored_mib");
    for d in REPORT_DEPTHS {
        out.push_str(&format!(",generated_params_d{d}"));
    }
    out.push('\n');
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{:.4}",
            row.c_max,
            row.stored_params,
            stored_mib_f32(row.stored_params)
        ));
        for d in REPORT_DEPTHS {
            match row.generated_at_depth.iter().find(|(dd, _)| *dd == d) {
                Some((_, n)) => out.push_str(&format!(",{n}")),
                None => out.push_str(","),
            }
        }
        out.push('\n');
    }
    out
}

/// One row of the depth sweep.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SweepRow {
    pub depth: usize,
    pub stored_params: usize,
    pub generated_params: usize,
    pub multadds: u64,
}

/// Sweep realized depth for a template, reporting stored versus materialized
/// parameters and the forward cost on a square input.
pub fn sweep_depth(
    template: &PuppetTemplate,
    d_list: &[usize],
    image_size: usize,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(d_list.len());
    for &d in d_list {
        rows.push(SweepRow {
            depth: d,
            stored_params: stored_count(template, d)?,
            generated_params: generated_param_count(template, d)?,
            multadds: analytic_multadds(template, d, image_size)?,
        });
    }
    rows.sort_by_key(|r| r.depth);
    Ok(rows)
}

/// CSV for the depth sweep; schema-stable header.
pub fn render_sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("depth,stored_params,generated_params,multadds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.depth, r.stored_params, r.generated_params, r.multadds
        ));
    }
    out
}
