pub mod cases;
pub mod fd;
