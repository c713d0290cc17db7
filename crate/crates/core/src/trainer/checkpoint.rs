//! Primitive sets as PLY, in the common splat property layout.

use std::path::Path;

use nalgebra::{Vector3, Vector4};

use crate::error::{Error, Result};
use crate::ply::{PlyData, Precision};
use crate::splat::GaussianPrimitive;

/// Writes `x y z nx ny nz f_dc_* f_rest_* opacity scale_* rot_*`. All
/// primitives must share one SH length.
pub fn write_primitives_ply(prims: &[GaussianPrimitive], path: &Path) -> Result<()> {
    let nsh = prims.first().map_or(1, |p| p.sh.len());
    let mut d = PlyData::from_positions(&prims.iter().map(|p| [p.mu.x, p.mu.y, p.mu.z]).collect::<Vec<_>>());
    for k in ["nx", "ny", "nz"] {
        d.push_prop(k, vec![0.0; prims.len()]);
    }
    for c in 0..3 {
        d.push_prop(&format!("f_dc_{c}"), prims.iter().map(|p| p.sh[0][c]).collect());
    }
    // Channel-major rest coefficients.
    for c in 0..3 {
        for j in 1..nsh {
            d.push_prop(
                &format!("f_rest_{}", c * (nsh - 1) + j - 1),
                prims.iter().map(|p| p.sh[j][c]).collect(),
            );
        }
    }
    d.push_prop("opacity", prims.iter().map(|p| p.opacity_logit).collect());
    for k in 0..3 {
        d.push_prop(&format!("scale_{k}"), prims.iter().map(|p| p.log_scale[k]).collect());
    }
    for k in 0..4 {
        d.push_prop(&format!("rot_{k}"), prims.iter().map(|p| p.rot[k]).collect());
    }
    d.write(path, Precision::F32)
}

pub fn read_primitives_ply(path: &Path) -> Result<Vec<GaussianPrimitive>> {
    let d = PlyData::read(path)?;
    let get = |name: &str| -> Result<&[f64]> {
        d.prop(name)
            .ok_or_else(|| Error::parse(path, 0, format!("missing property {name}")))
    };
    let n_rest = (0..).take_while(|i| d.prop(&format!("f_rest_{i}")).is_some()).count();
    if n_rest % 3 != 0 {
        return Err(Error::parse(path, 0, format!("{n_rest} f_rest properties is not a multiple of 3")));
    }
    let per = n_rest / 3;
    let (x, y, z) = (get("x")?, get("y")?, get("z")?);
    let dc: Vec<&[f64]> = (0..3).map(|c| get(&format!("f_dc_{c}"))).collect::<Result<_>>()?;
    let rest: Vec<&[f64]> = (0..n_rest).map(|i| get(&format!("f_rest_{i}"))).collect::<Result<_>>()?;
    let op = get("opacity")?;
    let sc: Vec<&[f64]> = (0..3).map(|k| get(&format!("scale_{k}"))).collect::<Result<_>>()?;
    let rot: Vec<&[f64]> = (0..4).map(|k| get(&format!("rot_{k}"))).collect::<Result<_>>()?;
    Ok((0..d.vertex_count())
        .map(|i| {
            let mut sh = vec![Vector3::new(dc[0][i], dc[1][i], dc[2][i])];
            for j in 0..per {
                sh.push(Vector3::new(rest[j][i], rest[per + j][i], rest[2 * per + j][i]));
            }
            GaussianPrimitive {
                mu: Vector3::new(x[i], y[i], z[i]),
                log_scale: Vector3::new(sc[0][i], sc[1][i], sc[2][i]),
                rot: Vector4::new(rot[0][i], rot[1][i], rot[2][i], rot[3][i]),
                opacity_logit: op[i],
                sh,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_rest_coefficients() {
        let mut a = GaussianPrimitive::new(
            Vector3::new(1.0, -2.0, 0.5),
            Vector3::new(0.25, 0.5, 0.125),
            Vector4::new(1.0, 0.0, 0.0, 0.0),
            0.25,
            [0.75, 0.5, 0.25],
        );
        a.sh.extend([Vector3::new(0.5, 0.25, -0.5), Vector3::new(1.0, 2.0, 3.0), Vector3::new(-1.0, 0.0, 0.125)]);
        let mut b = a.clone();
        b.mu.x = 4.0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ply");
        write_primitives_ply(&[a.clone(), b.clone()], &path).unwrap();
        let back = read_primitives_ply(&path).unwrap();
        assert_eq!(back.len(), 2);
        // Stored as f32: dyadic values survive exactly, the rest to f32 precision.
        assert_eq!(back[0].sh[1..], a.sh[1..]);
        assert!((back[0].sh[0] - a.sh[0]).norm() < 1e-6);
        assert_eq!(back[1].mu, b.mu);
        assert!((back[0].opacity_logit - a.opacity_logit).abs() < 1e-6);
    }
}
