fn main() {
    println!("qft (placeholder)");
}
