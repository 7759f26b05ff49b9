/* tslint:disable */
/* eslint-disable */

/**
 * Bar classifier trained in the page, plus the images it is tested on.
 */
export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    accuracy(): number;
    /**
     * Attacks sample `index`; `target < 0` means untargeted.
     */
    attack(index: number, target: number, iterations: number, step_size: number, c: number, seed: number): Outcome;
    classes(): number;
    image(index: number): Float64Array;
    label(index: number): number;
    constructor(seed: number);
    probabilities(pixels: Float64Array): Float64Array;
    sample_count(): number;
    side(): number;
}

export class Outcome {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    adversarial(): Float64Array;
    losses(): Float64Array;
    noise(): Float64Array;
    readonly iterations: number;
    readonly l2: number;
    readonly predicted: number;
    readonly queries: number;
    readonly success: boolean;
}

/**
 * Sampling probabilities over a `grid_h×grid_w` grid from a one-channel
 * `height×width` perturbation.
 */
export function importance_probabilities(delta: Float64Array, height: number, width: number, grid_h: number, grid_w: number): Float64Array;

/**
 * Bilinear decode of a one-channel `grid_h×grid_w` noise grid to `height×width`.
 */
export function upscale_noise(y: Float64Array, grid_h: number, grid_w: number, height: number, width: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly __wbg_outcome_free: (a: number, b: number) => void;
    readonly demo_accuracy: (a: number) => number;
    readonly demo_attack: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number];
    readonly demo_classes: (a: number) => number;
    readonly demo_image: (a: number, b: number) => [number, number];
    readonly demo_label: (a: number, b: number) => number;
    readonly demo_new: (a: number) => [number, number, number];
    readonly demo_probabilities: (a: number, b: number, c: number) => [number, number, number, number];
    readonly demo_sample_count: (a: number) => number;
    readonly demo_side: (a: number) => number;
    readonly importance_probabilities: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly outcome_adversarial: (a: number) => [number, number];
    readonly outcome_iterations: (a: number) => number;
    readonly outcome_l2: (a: number) => number;
    readonly outcome_losses: (a: number) => [number, number];
    readonly outcome_noise: (a: number) => [number, number];
    readonly outcome_predicted: (a: number) => number;
    readonly outcome_queries: (a: number) => number;
    readonly outcome_success: (a: number) => number;
    readonly upscale_noise: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
