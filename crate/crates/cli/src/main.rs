fn main() {
    println!("vistask");
}
