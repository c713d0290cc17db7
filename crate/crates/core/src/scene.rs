//! Posed cameras, sparse points and the COLMAP text model reader/writer.
//!
//! A scene directory is laid out as
//!
//! ```text
//! <root>/sparse/{cameras,images,points3D}.txt
//! <root>/images/<NAME>
//! <root>/masks/<stem>.png      8-bit coarse building mask
//! <root>/segments/<stem>.png   16-bit fine segment labels
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CAMERAS_FILE: &str = "cameras.txt";
pub const IMAGES_FILE: &str = "images.txt";
pub const POINTS_FILE: &str = "points3D.txt";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64
    }

    /// Camera-frame ray direction through pixel position `(u, v)`, normalized to unit z.
    #[inline]
    pub fn unproject_dir(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Same intrinsics with every pixel quantity multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let width = ((self.width as f64) * s).round().max(1.0) as usize;
        let height = ((self.height as f64) * s).round().max(1.0) as usize;
        Self {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: self.cx * s,
            cy: self.cy * s,
            width,
            height,
        }
    }
}

/// A posed pinhole camera. `rotation` maps world to camera, `center` is the
/// camera center in world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewRecord {
    pub view_id: u32,
    pub name: String,
    pub rotation: Matrix3<f64>,
    pub center: Vector3<f64>,
    pub intrinsics: CameraIntrinsics,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub segment_path: PathBuf,
}

/// Result of projecting a world point into a view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub z: f64,
}

impl ViewRecord {
    pub fn new(
        view_id: u32,
        name: impl Into<String>,
        rotation: Matrix3<f64>,
        center: Vector3<f64>,
        intrinsics: CameraIntrinsics,
    ) -> Self {
        let name = name.into();
        let stem = Path::new(&name)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| name.clone());
        Self {
            view_id,
            image_path: PathBuf::from("images").join(&name),
            mask_path: PathBuf::from("masks").join(format!("{stem}.png")),
            segment_path: PathBuf::from("segments").join(format!("{stem}.png")),
            name,
            rotation,
            center,
            intrinsics,
        }
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    /// Stored COLMAP translation `t = -R * center`.
    pub fn translation(&self) -> Vector3<f64> {
        -(self.rotation * self.center)
    }

    #[inline]
    pub fn world_to_camera(&self, xyz: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * (xyz - self.center)
    }

    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        let ortho = (r * r.transpose() - Matrix3::identity()).abs().max();
        ortho.max((r.determinant() - 1.0).abs())
    }

    /// Integer pixel hit by `xyz`, if it lies in front of the camera and inside the image.
    pub fn pixel_of(&self, xyz: &Vector3<f64>) -> Option<(usize, usize)> {
        let p = project_point(xyz, self);
        if p.z <= 0.0 || !p.u.is_finite() || !p.v.is_finite() {
            return None;
        }
        let px = pixel_index(p.u);
        let py = pixel_index(p.v);
        if px < 0 || py < 0 || px >= self.width() as i64 || py >= self.height() as i64 {
            return None;
        }
        Some((px as usize, py as usize))
    }
}

/// Round a continuous pixel coordinate (pixel centers at integers) to the
/// nearest index, ties toward negative infinity.
#[inline]
pub fn pixel_index(coord: f64) -> i64 {
    (coord - 0.5).ceil() as i64
}

/// Pinhole projection. `z` is returned even when the point is behind the camera.
pub fn project_point(xyz: &Vector3<f64>, view: &ViewRecord) -> Projection {
    let c = view.world_to_camera(xyz);
    let k = &view.intrinsics;
    Projection {
        u: k.fx * c.x / c.z + k.cx,
        v: k.fy * c.y / c.z + k.cy,
        z: c.z,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsePoint {
    pub point_id: u32,
    pub xyz: Vector3<f64>,
    pub color: Option<[u8; 3]>,
    pub track: Vec<u32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneBundle {
    pub views: Vec<ViewRecord>,
    pub points: Vec<SparsePoint>,
}

impl SceneBundle {
    pub fn validate(&self) -> Result<()> {
        let ids: std::collections::HashSet<u32> = self.views.iter().map(|v| v.view_id).collect();
        for p in &self.points {
            if p.track.is_empty() {
                return Err(Error::InvalidScene(format!(
                    "point {} has an empty track",
                    p.point_id
                )));
            }
            if !p.xyz.iter().all(|c| c.is_finite()) {
                return Err(Error::InvalidScene(format!(
                    "point {} has non-finite coordinates",
                    p.point_id
                )));
            }
            if let Some(bad) = p.track.iter().find(|id| !ids.contains(id)) {
                return Err(Error::InvalidScene(format!(
                    "point {} references missing view {bad}",
                    p.point_id
                )));
            }
        }
        Ok(())
    }

    pub fn view(&self, view_id: u32) -> Option<&ViewRecord> {
        self.views.iter().find(|v| v.view_id == view_id)
    }

    pub fn view_index(&self) -> HashMap<u32, usize> {
        self.views
            .iter()
            .enumerate()
            .map(|(i, v)| (v.view_id, i))
            .collect()
    }

    pub fn point_index(&self) -> HashMap<u32, usize> {
        self.points
            .iter()
            .enumerate()
            .map(|(i, p)| (p.point_id, i))
            .collect()
    }

    /// Join the relative image/mask/segment paths onto a scene root.
    pub fn rooted_at(mut self, root: &Path) -> Self {
        for v in &mut self.views {
            v.image_path = root.join(&v.image_path);
            v.mask_path = root.join(&v.mask_path);
            v.segment_path = root.join(&v.segment_path);
        }
        self
    }
}

/// Load `<root>/sparse` and resolve per-view file paths against `root`.
pub fn load_scene(root: &Path) -> Result<SceneBundle> {
    Ok(load_sparse_model(&root.join("sparse"))?.rooted_at(root))
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim().to_string()))
        .collect())
}

fn parse_num<T: std::str::FromStr>(tok: Option<&str>, file: &Path, line: usize, what: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| Error::parse(file, line, format!("missing {what}")))?;
    tok.parse()
        .map_err(|_| Error::parse(file, line, format!("invalid {what} `{tok}`")))
}

fn parse_cameras(path: &Path) -> Result<BTreeMap<u32, CameraIntrinsics>> {
    let mut cams = BTreeMap::new();
    for (ln, line) in read_lines(path)? {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let id: u32 = parse_num(it.next(), path, ln, "camera id")?;
        let model = it
            .next()
            .ok_or_else(|| Error::parse(path, ln, "missing camera model"))?;
        let width: usize = parse_num(it.next(), path, ln, "width")?;
        let height: usize = parse_num(it.next(), path, ln, "height")?;
        let params: Vec<f64> = it
            .map(|t| {
                t.parse()
                    .map_err(|_| Error::parse(path, ln, format!("invalid parameter `{t}`")))
            })
            .collect::<Result<_>>()?;
        let k = match model {
            "PINHOLE" if params.len() >= 4 => {
                CameraIntrinsics::new(params[0], params[1], params[2], params[3], width, height)
            }
            "SIMPLE_PINHOLE" if params.len() >= 3 => {
                CameraIntrinsics::new(params[0], params[0], params[1], params[2], width, height)
            }
            "PINHOLE" | "SIMPLE_PINHOLE" => {
                return Err(Error::parse(path, ln, "too few camera parameters"))
            }
            other => return Err(Error::UnsupportedModel(other.to_string())),
        };
        cams.insert(id, k);
    }
    Ok(cams)
}

/// COLMAP `(qw, qx, qy, qz)` to a world-to-camera rotation matrix.
pub fn quaternion_to_rotation(qw: f64, qx: f64, qy: f64, qz: f64) -> Matrix3<f64> {
    UnitQuaternion::from_quaternion(Quaternion::new(qw, qx, qy, qz))
        .to_rotation_matrix()
        .into_inner()
}

fn parse_images(path: &Path, cams: &BTreeMap<u32, CameraIntrinsics>) -> Result<Vec<ViewRecord>> {
    let lines: Vec<(usize, String)> = read_lines(path)?
        .into_iter()
        .filter(|(_, l)| !l.starts_with('#'))
        .collect();
    let mut views = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let (ln, line) = &lines[i];
        if line.is_empty() {
            i += 1;
            continue;
        }
        let mut it = line.split_whitespace();
        let id: u32 = parse_num(it.next(), path, *ln, "image id")?;
        let mut q = [0.0; 4];
        for (k, slot) in q.iter_mut().enumerate() {
            *slot = parse_num(it.next(), path, *ln, &format!("quaternion[{k}]"))?;
        }
        let mut t = Vector3::zeros();
        for k in 0..3 {
            t[k] = parse_num(it.next(), path, *ln, &format!("translation[{k}]"))?;
        }
        let cam_id: u32 = parse_num(it.next(), path, *ln, "camera id")?;
        let name = it
            .next()
            .ok_or_else(|| Error::parse(path, *ln, "missing image name"))?;
        let k = *cams
            .get(&cam_id)
            .ok_or_else(|| Error::parse(path, *ln, format!("unknown camera id {cam_id}")))?;
        let rotation = quaternion_to_rotation(q[0], q[1], q[2], q[3]);
        let center = -(rotation.transpose() * t);
        views.push(ViewRecord::new(id, name, rotation, center, k));
        // Each image record is followed by its 2D observation line, which may be empty.
        i += 2;
    }
    Ok(views)
}

fn parse_points(path: &Path) -> Result<Vec<SparsePoint>> {
    let mut points = Vec::new();
    for (ln, line) in read_lines(path)? {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 8 {
            return Err(Error::parse(path, ln, "expected at least 8 fields"));
        }
        let point_id: u32 = parse_num(Some(toks[0]), path, ln, "point id")?;
        let mut xyz = Vector3::zeros();
        for k in 0..3 {
            xyz[k] = parse_num(Some(toks[1 + k]), path, ln, "coordinate")?;
        }
        let mut rgb = [0u8; 3];
        for k in 0..3 {
            rgb[k] = parse_num(Some(toks[4 + k]), path, ln, "color")?;
        }
        let rest = &toks[8..];
        if rest.len() % 2 != 0 {
            return Err(Error::parse(path, ln, "odd number of track entries"));
        }
        let mut track = Vec::with_capacity(rest.len() / 2);
        for pair in rest.chunks(2) {
            let vid: u32 = parse_num(Some(pair[0]), path, ln, "track image id")?;
            if !track.contains(&vid) {
                track.push(vid);
            }
        }
        points.push(SparsePoint {
            point_id,
            xyz,
            color: Some(rgb),
            track,
        });
    }
    Ok(points)
}

/// Parse a COLMAP text model directory.
pub fn load_sparse_model(dir: &Path) -> Result<SceneBundle> {
    let cams = parse_cameras(&dir.join(CAMERAS_FILE))?;
    let views = parse_images(&dir.join(IMAGES_FILE), &cams)?;
    let points = parse_points(&dir.join(POINTS_FILE))?;
    let scene = SceneBundle { views, points };
    scene.validate()?;
    Ok(scene)
}

/// Write the scene as a COLMAP text model; one camera entry per view.
pub fn write_sparse_model(scene: &SceneBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut cams = String::from("# CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    let mut imgs = String::from(
        "# IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n# POINTS2D[] as (X, Y, POINT3D_ID)\n",
    );
    for v in &scene.views {
        let k = &v.intrinsics;
        let _ = writeln!(
            cams,
            "{} PINHOLE {} {} {} {} {} {}",
            v.view_id, k.width, k.height, k.fx, k.fy, k.cx, k.cy
        );
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(v.rotation));
        let t = v.translation();
        let _ = writeln!(
            imgs,
            "{} {} {} {} {} {} {} {} {} {}\n",
            v.view_id, q.w, q.i, q.j, q.k, t.x, t.y, t.z, v.view_id, v.name
        );
    }
    let mut pts = String::from("# POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n");
    for p in &scene.points {
        let [r, g, b] = p.color.unwrap_or([128, 128, 128]);
        let _ = write!(pts, "{} {} {} {} {r} {g} {b} 0", p.point_id, p.xyz.x, p.xyz.y, p.xyz.z);
        for (i, vid) in p.track.iter().enumerate() {
            let _ = write!(pts, " {vid} {i}");
        }
        pts.push('\n');
    }
    for (name, body) in [(CAMERAS_FILE, cams), (IMAGES_FILE, imgs), (POINTS_FILE, pts)] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
