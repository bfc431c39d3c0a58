import { ApiClient, ClassesInfo } from './api.js';
import { SessionController } from './session.js';
import { AutoStepper, render, UiElements } from './ui.js';

function el<T extends HTMLElement>(id: string): T {
    const node = document.getElementById(id);
    if (!node) throw new Error(`missing #${id}`);
    return node as T;
}

async function connect(): Promise<void> {
    const baseUrl = el<HTMLInputElement>('server-url').value;
    const api = new ApiClient(baseUrl);
    let info: ClassesInfo;
    try {
        info = await api.classes();
    } catch (err) {
        el('banner').textContent = `cannot reach server: ${err}`;
        el('banner').style.display = 'block';
        return;
    }
    el('banner').style.display = 'none';

    const classSelect = el<HTMLSelectElement>('class-select');
    classSelect.innerHTML = '';
    for (const cls of info.classes) {
        const opt = document.createElement('option');
        opt.value = String(cls.id);
        opt.textContent = cls.name;
        classSelect.appendChild(opt);
    }
    const targetLen = el<HTMLInputElement>('target-len');
    targetLen.value = String(info.train_len);
    targetLen.max = String(info.max_target_len);
    el('variant-label').textContent =
        `${info.variant} checkpoint, train length ${info.train_len}, ceiling ${info.max_target_len}`;

    const els: UiElements = {
        canvas: el('canvas'),
        stepButton: el<HTMLButtonElement>('step'),
        rejectButton: el<HTMLButtonElement>('reject'),
        banner: el('banner'),
        hint: el('hint'),
        progress: el('progress'),
    };
    const controller = new SessionController(api, (view) => render(view, els));
    const auto = new AutoStepper(() => controller.step(), () => controller.view.done);

    el<HTMLButtonElement>('start').onclick = () => {
        auto.pause();
        const seedRaw = el<HTMLInputElement>('seed').value;
        const cfgRaw = el<HTMLInputElement>('cfg-end').value;
        void controller.start(
            {
                classId: Number(classSelect.value),
                targetLen: Number(targetLen.value),
                seed: seedRaw === '' ? undefined : Number(seedRaw),
                cfgEnd: cfgRaw === '' ? undefined : Number(cfgRaw),
            },
            info,
        );
    };
    els.stepButton.onclick = () => void controller.step();
    els.rejectButton.onclick = () => void controller.reject();
    const autoButton = el<HTMLButtonElement>('auto');
    autoButton.onclick = () => {
        if (auto.running) {
            auto.pause();
            autoButton.textContent = 'auto-step';
        } else {
            auto.start();
            autoButton.textContent = 'pause';
        }
    };
    for (const mult of [1, 2, 4, 8]) {
        el<HTMLButtonElement>(`len-x${mult}`).onclick = () => {
            targetLen.value = String(Math.min(mult * info.train_len, info.max_target_len));
        };
    }
    el('banner').onclick = () => controller.dismissBanner();
    render(controller.view, els);
}

el<HTMLButtonElement>('connect').onclick = () => void connect();
