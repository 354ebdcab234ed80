//! Losses, the optimizer and schedule, and the teacher / distillation /
//! expansion training runs.

mod loss;
mod optim;
mod phases;
mod trainer;

use std::io::Write;
use std::path::Path;

pub use loss::{
    contrastive_loss, contrastive_loss_value, distill_loss, distill_loss_value, joint_loss, mix_losses, DistillKind,
    JointLoss,
};
pub use optim::{adamw_step, lr_schedule, AdamW, LossRecord, TrainState};
pub use phases::{
    expanded_text_config, pretrain_teacher, run_distillation, run_expansion, student_from_teacher,
    teacher_student_cosine, window_views, DistillConfig, ExpandConfig, TeacherConfig, TrainOutcome,
};
pub use trainer::{
    batch_embeddings, distill_loss_and_grads, flatten_gradients, joint_loss_and_grads, set_trainable_values,
    trainable_values, BatchEmbeddings, Gradients, Trainable, TEMPERATURE_RANGE,
};

use crate::error::{Error, Result};

pub const LOSS_CSV_HEADER: &str = "step,lr,loss,loss_short,loss_long";

/// Loss curve as CSV; absent terms are empty cells.
pub fn loss_csv(history: &[LossRecord]) -> String {
    let cell = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step,
            r.lr,
            r.loss,
            cell(r.loss_short),
            cell(r.loss_long)
        ));
    }
    out
}

pub fn write_loss_csv(path: impl AsRef<Path>, history: &[LossRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(loss_csv(history).as_bytes()).map_err(|e| Error::io(path, e))
}
