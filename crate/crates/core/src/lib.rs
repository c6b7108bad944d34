//! Text normalization and confidence-free evaluation for oriented aerial
//! object detection.
//!
//! * [`geometry`]: canonical oriented quadrilaterals, convex clipping, IoU.
//! * [`codec`]: quantized `<loc_N>` token responses and their tolerant parser.
//! * [`metrics`]: AP, mAP with substituted confidences, F1, threshold sweeps.
//! * [`dataset`]: DOTA-style annotation loading and multi-dataset merging.
//! * [`cli`]: the `obbtext` command line built on top of the above.

pub mod cli;
pub mod codec;
pub mod dataset;
pub mod formats;
pub mod geometry;
pub mod metrics;
pub mod render;
pub mod report;

pub use codec::{CategorySet, ParseReport, ResponseDoc};
pub use dataset::{Corpus, Sample};
pub use geometry::{ConvexPolygon, GeometryError, Point, QuadBox};
pub use metrics::{Detection, EvalConfig, MetricsReport, SweepResult};
