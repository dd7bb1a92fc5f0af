pub mod bandit;
pub mod driver;
pub mod env;
pub mod evaluator;
pub mod mcts;
pub mod planner;
pub mod space;
