//! Acceptance suite placeholder; filled in once the training stack lands.

fn main() {
    println!("acceptance: not yet implemented");
}
