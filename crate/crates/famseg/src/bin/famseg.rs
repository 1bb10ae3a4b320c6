fn main() {
    // command front end is wired up in lib::cli; placeholder keeps the
    // workspace building while modules land
}
