//! Detector assembly: configuration, network construction, training loss,
//! and prediction post-processing.

pub mod config;
pub mod loss;
pub mod net;
pub mod post;

pub use config::{stride_of, DetectSet, ModelConfig};
pub use loss::{decode_box_map, detection_loss, GtBox, LossParts};
pub use net::{build_model, merge_all_reparam, model_forward, HeadOut, Model, Trace};
pub use post::{
    corner_iou, decode_and_nms, decode_boxes, nms, reflect_pad_to, rescale_box_for_pad,
    DetectionBox, HeadMaps,
};
