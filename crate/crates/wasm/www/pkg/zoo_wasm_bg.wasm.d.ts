/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const __wbg_outcome_free: (a: number, b: number) => void;
export const demo_accuracy: (a: number) => number;
export const demo_attack: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number];
export const demo_classes: (a: number) => number;
export const demo_image: (a: number, b: number) => [number, number];
export const demo_label: (a: number, b: number) => number;
export const demo_new: (a: number) => [number, number, number];
export const demo_probabilities: (a: number, b: number, c: number) => [number, number, number, number];
export const demo_sample_count: (a: number) => number;
export const demo_side: (a: number) => number;
export const importance_probabilities: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const outcome_adversarial: (a: number) => [number, number];
export const outcome_iterations: (a: number) => number;
export const outcome_l2: (a: number) => number;
export const outcome_losses: (a: number) => [number, number];
export const outcome_noise: (a: number) => [number, number];
export const outcome_predicted: (a: number) => number;
export const outcome_queries: (a: number) => number;
export const outcome_success: (a: number) => number;
export const upscale_noise: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_start: () => void;
