//! Synthetic images and sidecars for generated cohorts.

use std::path::Path;

use drscreen::analytics::CohortRecord;
use drscreen::synth::{render, DiscPlacement, FundusSpec};
use drscreen::Laterality;
use image::RgbImage;

use crate::sidecar::{Sidecar, SidecarEye, SidecarImage};

/// Lesion count painted on the affected eye of a referable study.
pub const LESIONS: usize = 12;

/// Two fields per eye, macula-centred then disc-centred; the latent finding
/// is drawn on the affected eye only.
pub fn render_study(record: &CohortRecord, size: u32, seed: u64) -> (Sidecar, Vec<(String, RgbImage)>) {
    let truth = record.truth;
    let id = &record.event.study_id;
    let mut files = Vec::new();
    let mut eyes = Vec::new();
    for (e, lat) in [Laterality::Left, Laterality::Right].into_iter().enumerate() {
        let affected = e as u8 == truth.affected_eye;
        let mut images = Vec::new();
        for (k, disc) in [DiscPlacement::Lateral, DiscPlacement::Centered].into_iter().enumerate() {
            let mut spec = FundusSpec {
                size,
                disc,
                seed: seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add((e * 2 + k) as u64),
                ..Default::default()
            };
            if affected && truth.referable_dr {
                spec.lesions = LESIONS;
            }
            if affected && !truth.gradable {
                spec.blur_sigma = 6.0 * size as f32 / 256.0;
                spec.contrast = 0.25;
            }
            let file = format!("{id}_{lat}{k}.png");
            images.push(SidecarImage {
                file: file.clone(),
                acquisition_index: k as u32,
                image_id: None,
                source_tag: Some(if k == 0 { "central" } else { "nasal" }.into()),
            });
            files.push((file, render(&spec)));
        }
        eyes.push(SidecarEye { eye_id: None, laterality: lat, images });
    }
    let sidecar = Sidecar {
        study_id: id.clone(),
        received_at: Some(record.event.timestamp),
        gp_id: record.event.gp_id.clone(),
        pressure_referral: record.event.pressure_referral,
        eyes,
    };
    (sidecar, files)
}

/// Writes `<study_id>.json` plus its PNGs into `dir`.
pub fn write_study(dir: &Path, record: &CohortRecord, size: u32, seed: u64) -> anyhow::Result<()> {
    let (sidecar, files) = render_study(record, size, seed);
    for (name, img) in files {
        img.save(dir.join(name))?;
    }
    std::fs::write(dir.join(format!("{}.json", sidecar.study_id)), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}
