fn main() {
    println!("updown");
}
