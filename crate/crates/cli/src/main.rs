fn main() {
    println!("hdrvid");
}
