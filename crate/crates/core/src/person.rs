//! A person hypothesis (predicted or ground truth) with every quantity the
//! matching cost, losses and metrics consume.

use serde::{Deserialize, Serialize};

use crate::body_model::{forward, BodyModelSpec, BodyParams, Vec3};
use crate::camera::{box_from_points, project, CameraParams, DepthConvention, NormBox};
use crate::matching::{PredView, TargetView};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonRecord {
    /// Detection confidence; 1 for ground truth.
    pub conf: f64,
    pub params: BodyParams,
    pub camera: CameraParams,
    /// Camera-space position of the model origin (meters).
    pub translation: Vec3,
    /// Camera-space depth of the root joint (meters).
    pub depth: f64,
    /// Posed joints in model coordinates.
    pub joints: Vec<Vec3>,
    /// Posed vertices in model coordinates.
    pub vertices: Vec<Vec3>,
    /// Projected joints, normalized image coordinates.
    pub kpts: Vec<[f64; 2]>,
    /// Box around the projected vertices.
    pub bbox: NormBox,
}

impl PersonRecord {
    pub fn derive(
        model: &BodyModelSpec,
        params: BodyParams,
        camera: CameraParams,
        conf: f64,
        conv: &DepthConvention,
    ) -> Result<Self> {
        let out = forward(model, &params)?;
        let translation = conv.translation(&camera)?;
        let kpts = project(&out.joints, &camera);
        let bbox = box_from_points(&project(&out.vertices, &camera))?;
        Ok(Self {
            conf,
            depth: translation.z + out.joints[0].z,
            params,
            camera,
            translation,
            joints: out.joints,
            vertices: out.vertices,
            kpts,
            bbox,
        })
    }

    pub fn joints_cam(&self) -> Vec<Vec3> {
        self.joints.iter().map(|j| j + self.translation).collect()
    }

    pub fn vertices_cam(&self) -> Vec<Vec3> {
        self.vertices.iter().map(|v| v + self.translation).collect()
    }

    pub fn root_cam(&self) -> Vec3 {
        self.joints[0] + self.translation
    }

    /// Joints relative to the root joint.
    pub fn joints_root_relative(&self) -> Vec<Vec3> {
        let root = self.joints[0];
        self.joints.iter().map(|j| j - root).collect()
    }

    pub fn pred_view(&self) -> PredView<'_> {
        PredView {
            conf: self.conf,
            bbox: self.bbox,
            kpts: &self.kpts,
        }
    }

    pub fn target_view(&self) -> TargetView<'_> {
        TargetView {
            bbox: self.bbox,
            kpts: &self.kpts,
            visible: None,
        }
    }
}
