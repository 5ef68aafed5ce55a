use ciffreeda_core::federation::{ClientRunner, LocalReport};
use ciffreeda_core::HeadParams;
use rayon::prelude::*;

/// Runs the clients of a round on the rayon pool. Every client owns its
/// random stream, so results match [`ciffreeda_core::federation::SerialRunner`]
/// bit for bit.
#[derive(Debug, Clone, Copy, Default)]
pub struct RayonRunner;

impl ClientRunner for RayonRunner {
    fn run(
        &self,
        jobs: usize,
        job: &(dyn Fn(usize) -> ciffreeda_core::Result<(HeadParams, LocalReport)> + Sync),
    ) -> Vec<ciffreeda_core::Result<(HeadParams, LocalReport)>> {
        (0..jobs).into_par_iter().map(job).collect()
    }
}
