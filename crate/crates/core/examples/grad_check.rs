//! Verifies every layer's gradients against central differences in double
//! precision, then checks single-precision gradients of the full model.

use mango::diagnostics::{end_to_end_grad_check, layer_grad_suite, EndToEndSetup};
use mango::model::{Conditioning, DecoderKind};

fn main() -> mango::Result<()> {
    for row in layer_grad_suite(0)? {
        println!("{:<28} {:.2e} over {} entries", row.name, row.max_rel_error, row.checked_entries);
    }
    let setup = EndToEndSetup {
        width: 8,
        per_param: 2,
        ..EndToEndSetup::default()
    };
    for kind in [DecoderKind::Mango, DecoderKind::Autoregressive] {
        let r = end_to_end_grad_check(Conditioning::Meta, kind, &setup, 0)?;
        println!("end to end {:<16} f32 vs f64 {:.2e} (worst: {})", kind.name(), r.max_rel_error, r.worst_param);
    }
    Ok(())
}
