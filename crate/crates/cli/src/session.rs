use std::collections::VecDeque;
use std::sync::Arc;

use lightsq::{Abstraction, RunConfig, TsdfGrid};

/// Undoable steps kept per session.
pub const UNDO_DEPTH: usize = 32;

/// The loaded grid and the abstraction history. The last history entry is the
/// current abstraction.
#[derive(Clone, Debug)]
pub struct SessionState {
    pub grid: Arc<TsdfGrid>,
    pub config: RunConfig,
    history: VecDeque<Abstraction>,
}

impl SessionState {
    pub fn new(grid: TsdfGrid, abstraction: Abstraction, config: RunConfig) -> Self {
        Self {
            grid: Arc::new(grid),
            config,
            history: VecDeque::from([abstraction]),
        }
    }

    pub fn current(&self) -> &Abstraction {
        self.history.back().expect("history is never empty")
    }

    /// Makes `next` current, forgetting the oldest state beyond the undo depth.
    pub fn push(&mut self, next: Abstraction) {
        self.history.push_back(next);
        while self.history.len() > UNDO_DEPTH + 1 {
            self.history.pop_front();
        }
    }

    /// Steps back once. `None` when there is nothing to undo.
    pub fn undo(&mut self) -> Option<&Abstraction> {
        if self.history.len() <= 1 {
            return None;
        }
        self.history.pop_back();
        Some(self.current())
    }

    pub fn undo_available(&self) -> usize {
        self.history.len() - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lightsq::abstraction::GridMeta;
    use lightsq::Normalization;

    fn tagged(k: usize) -> Abstraction {
        Abstraction::empty(Normalization::identity(), GridMeta { resolution: k, tau: 0.1 })
    }

    fn session() -> SessionState {
        SessionState::new(TsdfGrid::from_sdf(8, 1.0, |_| 1.0), tagged(0), RunConfig::default())
    }

    #[test]
    fn push_then_undo_restores() {
        let mut s = session();
        assert!(s.undo().is_none());
        s.push(tagged(1));
        s.push(tagged(2));
        assert_eq!(s.current(), &tagged(2));
        assert_eq!(s.undo(), Some(&tagged(1)));
        assert_eq!(s.undo(), Some(&tagged(0)));
        assert!(s.undo().is_none());
        assert_eq!(s.current(), &tagged(0));
    }

    #[test]
    fn history_is_bounded() {
        let mut s = session();
        for k in 1..=100 {
            s.push(tagged(k));
            assert_eq!(s.current(), &tagged(k));
        }
        assert_eq!(s.undo_available(), UNDO_DEPTH);
        let mut last = 100;
        while let Some(a) = s.undo() {
            last = a.grid.resolution;
        }
        assert_eq!(last, 100 - UNDO_DEPTH);
    }
}
