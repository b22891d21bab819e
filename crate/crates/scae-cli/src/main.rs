fn main() {
    println!("scae");
}
