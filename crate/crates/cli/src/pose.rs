//! Camera poses given on the command line.

use hanerf_core::cameras::CameraPose;
use hanerf_core::datagen::DatasetManifest;

use crate::exit::{CmdResult, Failure};

/// A pose argument: 16 row-major camera-to-world reals separated by commas
/// or whitespace, or the id of a frame in a dataset manifest.
pub fn parse_pose(arg: &str, manifest: Option<&DatasetManifest>) -> CmdResult<CameraPose> {
    let parts: Vec<&str> = arg
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .collect();
    match parts.len() {
        1 => {
            let id: usize = parts[0].parse().map_err(|_| {
                Failure::bad_input(format!("pose `{arg}` is neither a frame id nor 16 reals"))
            })?;
            let manifest = manifest.ok_or_else(|| {
                Failure::bad_input(format!(
                    "pose `{arg}` is a frame id but no --dataset was given"
                ))
            })?;
            let frame = manifest
                .frames
                .iter()
                .find(|f| f.id == id)
                .ok_or_else(|| Failure::bad_input(format!("no frame {id} in the dataset")))?;
            Ok(CameraPose::from_row_major(&frame.pose)?)
        }
        16 => {
            let m = parts
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Failure::bad_input(format!("pose `{arg}`: {e}")))?;
            Ok(CameraPose::from_row_major(&m)?)
        }
        n => Err(Failure::bad_input(format!(
            "pose `{arg}` has {n} values, expected 16 or a frame id"
        ))),
    }
}
