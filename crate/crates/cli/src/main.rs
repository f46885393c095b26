fn main() {
    std::process::exit(stoturn::run(std::env::args_os()));
}
