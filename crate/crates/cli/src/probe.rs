use repsim_core::blocks::probe_tensor;
use repsim_core::ActivationArchive;

use crate::analysis::read_archive;
use crate::args::ProbeArgs;
use crate::error::CliError;
use crate::manifest::Run;

/// Writes `probe.actv`: one image, every pixel replaced by its top-left
/// pixel. Probing a probe reproduces it byte for byte.
pub fn probe(a: ProbeArgs) -> anyhow::Result<()> {
    let mut run = Run::new("probe", &a, &a.out.out)?;
    let archive = read_archive(&mut run, &a.images)?;
    let images = match &a.layer {
        Some(id) => archive
            .layer(id)
            .ok_or_else(|| CliError::Usage(format!("unknown layer `{id}`")))?,
        None if archive.layer_count() == 1 => &archive.layers()[0],
        None => {
            return Err(CliError::Usage(format!(
                "archive has {} layers; pick one with --layer",
                archive.layer_count()
            ))
            .into())
        }
    };
    let tensor = probe_tensor(images, a.index)?;
    let id = archive.example_ids()[a.index].clone();
    let out = ActivationArchive::new(vec![tensor], Some(vec![id]), archive.metadata().clone())?
        .with_metadata("solid_color_probe", "true");
    run.write("probe.actv", &out.to_bytes()?)?;
    run.finish()?;
    Ok(())
}
